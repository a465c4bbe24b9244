//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Graph`] records operations at tensor granularity as they execute;
//! node ids are indices into the tape, so the tape order *is* a topological
//! order. [`Graph::backward`] walks it once in reverse, accumulating
//! gradients into every node that (transitively) depends on a leaf registered
//! with `requires_grad`. Nodes that don't need gradients are skipped, so
//! freezing the base model during adapter training costs nothing.
//!
//! A graph supports exactly one backward pass; values stay readable
//! afterwards, and leaf gradients are read back with [`Graph::grad`].
//! Intermediate gradients are dropped as soon as they have been consumed.

use super::kernels as k;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    /// `[m,k] @ [k,n]`
    Matmul { a: NodeId, b: NodeId },
    /// `[m,k] @ [n,k]^T`
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// `a + s * b`
    AddScaled { a: NodeId, b: NodeId, s: T },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, s: T },
    Silu { a: NodeId },
    /// Row RMS norm; `saved` holds the per-row reciprocal RMS.
    RmsNorm { x: NodeId, gamma: NodeId },
    /// Rotary embedding at absolute `positions`; backward is the inverse rotation.
    Rope { x: NodeId, n_heads: usize, base: f64, ntk_scale: f64, positions: Vec<usize> },
    /// Causal row softmax; the node value doubles as the saved probabilities.
    SoftmaxCausal { a: NodeId },
    SliceCols { a: NodeId, from: usize, to: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Gather rows of an embedding table.
    Embed { table: NodeId, ids: Vec<u32> },
    /// Inverted-scale dropout; the mask tensor holds 0 or 1/(1-p).
    Dropout { a: NodeId, mask: Tensor<T> },
    /// Mean masked cross-entropy; `saved` holds the row softmax.
    CeMasked { logits: NodeId, targets: Vec<u32>, mask: Vec<bool> },
    Sum { a: NodeId },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    saved: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    ran_backward: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), ran_backward: false }
    }

    fn push(&mut self, value: Tensor<T>, saved: Option<Tensor<T>>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, saved, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Register a tensor as a tape input. Gradient is accumulated iff the
    /// tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let ng = t.requires_grad;
        self.push(t, None, Op::Leaf, ng)
    }

    /// Register a tensor that never receives gradient, whatever its flag.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, None, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of a node after [`backward`](Self::backward). Present on
    /// leaves that required grad; intermediate gradients are freed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = k::matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, None, Op::Matmul { a, b }, ng)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = k::matmul_nt(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, None, Op::MatmulNT { a, b }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_scaled_assign(self.value(b), T::ONE);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, None, Op::Add { a, b }, ng)
    }

    /// `a + s * b`
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, s: T) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add_scaled shape mismatch");
        let mut v = self.value(a).clone();
        v.add_scaled_assign(self.value(b), s);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, None, Op::AddScaled { a, b, s }, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let mut v = self.value(a).clone();
        for (x, y) in v.as_mut_slice().iter_mut().zip(self.nodes[b.0].value.as_slice()) {
            *x *= *y;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(v, None, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.as_mut_slice() {
            *x *= s;
        }
        let ng = self.needs(a);
        self.push(v, None, Op::Scale { a, s }, ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = k::silu(self.value(a));
        let ng = self.needs(a);
        self.push(v, None, Op::Silu { a }, ng)
    }

    pub fn rmsnorm(&mut self, x: NodeId, gamma: NodeId, eps: T) -> NodeId {
        let (v, inv) = k::rmsnorm_rows(self.value(x), self.value(gamma), eps);
        let ng = self.needs(x) || self.needs(gamma);
        self.push(v, Some(inv), Op::RmsNorm { x, gamma }, ng)
    }

    pub fn rope(&mut self, x: NodeId, n_heads: usize, positions: Vec<usize>, base: f64, ntk_scale: f64) -> NodeId {
        let mut v = self.value(x).clone();
        k::rope_rows_inplace(&mut v, n_heads, &positions, base, ntk_scale, false);
        let ng = self.needs(x);
        self.push(v, None, Op::Rope { x, n_heads, base, ntk_scale, positions }, ng)
    }

    /// Softmax over rows where row `i` may see columns `0..=offset+i`.
    pub fn softmax_causal(&mut self, a: NodeId, offset: usize) -> NodeId {
        let v = k::softmax_causal_rows(self.value(a), offset);
        let ng = self.needs(a);
        self.push(v, None, Op::SoftmaxCausal { a }, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let src = self.value(a);
        let (t, c) = (src.rows(), src.cols());
        assert!(from < to && to <= c, "slice_cols {from}..{to} of {c}");
        let w = to - from;
        let mut v = Tensor::zeros(&[t, w]);
        for i in 0..t {
            v.as_mut_slice()[i * w..(i + 1) * w].copy_from_slice(&src.as_slice()[i * c + from..i * c + to]);
        }
        let ng = self.needs(a);
        self.push(v, None, Op::SliceCols { a, from, to }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let t = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Tensor::zeros(&[t, total]);
        let mut off = 0;
        for p in parts {
            let src = self.value(*p);
            assert_eq!(src.rows(), t, "concat_cols row mismatch");
            let w = src.cols();
            for i in 0..t {
                v.as_mut_slice()[i * total + off..i * total + off + w]
                    .copy_from_slice(&src.as_slice()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, None, Op::ConcatCols { parts: parts.to_vec() }, ng)
    }

    pub fn embed(&mut self, table: NodeId, ids: Vec<u32>) -> NodeId {
        let v = k::embed_rows(self.value(table), &ids);
        let ng = self.needs(table);
        self.push(v, None, Op::Embed { table, ids }, ng)
    }

    /// Inverted-scale dropout with keep probability `1 - p`. `p == 0` is the
    /// identity and records nothing.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut impl rand::Rng) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout rate {p}");
        if p == 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let src = self.value(a);
        let mut mask = Tensor::zeros(src.shape());
        for m in mask.as_mut_slice() {
            if rng.gen::<f64>() >= p {
                *m = keep;
            }
        }
        let mut v = src.clone();
        for (x, m) in v.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *x *= *m;
        }
        let ng = self.needs(a);
        self.push(v, None, Op::Dropout { a, mask }, ng)
    }

    /// Mean cross-entropy over the rows selected by `mask`. Scalar node.
    pub fn ce_masked(&mut self, logits: NodeId, targets: Vec<u32>, mask: Vec<bool>) -> NodeId {
        let (loss, probs) = k::ce_masked(self.value(logits), &targets, &mask);
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Some(probs), Op::CeMasked { logits, targets, mask }, ng)
    }

    /// Sum of all elements. Scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut s = T::ZERO;
        for v in self.value(a).as_slice() {
            s += *v;
        }
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), None, Op::Sum { a }, ng)
    }

    /// Reverse pass from a scalar root. Each node is visited exactly once, in
    /// reverse tape (= reverse topological) order. May be called once per
    /// graph.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.ran_backward {
            return Err(Error::runtime("backward already ran on this graph"));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::runtime(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.ran_backward = true;
        if !self.nodes[root.0].needs_grad {
            return Ok(()); // nothing depends on a trainable leaf
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(T::ONE));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Inputs always precede outputs on the tape, so split at i.
            let (before, at) = self.nodes.split_at_mut(i);
            let node = &mut at[0];
            let Some(g) = node.grad.take() else { continue };

            match &node.op {
                Op::Leaf => {
                    // Keep leaf gradients readable after the pass.
                    node.grad = Some(g);
                }
                Op::Matmul { a, b } => {
                    if before[a.0].needs_grad {
                        let da = k::matmul_nt(&g, &before[b.0].value);
                        accum(&mut before[a.0], da);
                    }
                    if before[b.0].needs_grad {
                        let db = k::matmul_tn(&before[a.0].value, &g);
                        accum(&mut before[b.0], db);
                    }
                }
                Op::MatmulNT { a, b } => {
                    if before[a.0].needs_grad {
                        let da = k::matmul(&g, &before[b.0].value);
                        accum(&mut before[a.0], da);
                    }
                    if before[b.0].needs_grad {
                        let db = k::matmul_tn(&g, &before[a.0].value);
                        accum(&mut before[b.0], db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if before[a.0].needs_grad {
                        accum(&mut before[a.0], g.clone());
                    }
                    if before[b.0].needs_grad {
                        accum(&mut before[b.0], g);
                    }
                }
                Op::AddScaled { a, b, s } => {
                    let (a, b, s) = (*a, *b, *s);
                    if before[b.0].needs_grad {
                        let mut gb = g.clone();
                        for v in gb.as_mut_slice() {
                            *v *= s;
                        }
                        accum(&mut before[b.0], gb);
                    }
                    if before[a.0].needs_grad {
                        accum(&mut before[a.0], g);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if before[a.0].needs_grad {
                        let mut ga = g.clone();
                        for (x, y) in ga.as_mut_slice().iter_mut().zip(before[b.0].value.as_slice()) {
                            *x *= *y;
                        }
                        accum(&mut before[a.0], ga);
                    }
                    if before[b.0].needs_grad {
                        let mut gb = g;
                        for (x, y) in gb.as_mut_slice().iter_mut().zip(before[a.0].value.as_slice()) {
                            *x *= *y;
                        }
                        accum(&mut before[b.0], gb);
                    }
                }
                Op::Scale { a, s } => {
                    let (a, s) = (*a, *s);
                    if before[a.0].needs_grad {
                        let mut ga = g;
                        for v in ga.as_mut_slice() {
                            *v *= s;
                        }
                        accum(&mut before[a.0], ga);
                    }
                }
                Op::Silu { a } => {
                    let a = *a;
                    if before[a.0].needs_grad {
                        let mut ga = g;
                        for (x, v) in ga.as_mut_slice().iter_mut().zip(before[a.0].value.as_slice()) {
                            *x *= k::silu_grad(*v);
                        }
                        accum(&mut before[a.0], ga);
                    }
                }
                Op::RmsNorm { x, gamma } => {
                    let (x, gamma) = (*x, *gamma);
                    let inv = node.saved.as_ref().expect("rmsnorm saved inv_rms");
                    let (gx, gg) = k::rmsnorm_backward(&before[x.0].value, &before[gamma.0].value, inv, &g);
                    if before[x.0].needs_grad {
                        accum(&mut before[x.0], gx);
                    }
                    if before[gamma.0].needs_grad {
                        accum(&mut before[gamma.0], gg);
                    }
                }
                Op::Rope { x, n_heads, base, ntk_scale, positions } => {
                    let x = *x;
                    if before[x.0].needs_grad {
                        let mut gx = g;
                        k::rope_rows_inplace(&mut gx, *n_heads, positions, *base, *ntk_scale, true);
                        accum(&mut before[x.0], gx);
                    }
                }
                Op::SoftmaxCausal { a } => {
                    let a = *a;
                    if before[a.0].needs_grad {
                        let gx = k::softmax_backward_rows(&node.value, &g);
                        accum(&mut before[a.0], gx);
                    }
                }
                Op::SliceCols { a, from, to } => {
                    let (a, from, to) = (*a, *from, *to);
                    if before[a.0].needs_grad {
                        let c = before[a.0].value.cols();
                        let t = before[a.0].value.rows();
                        let w = to - from;
                        let mut ga = Tensor::zeros(&[t, c]);
                        for i in 0..t {
                            ga.as_mut_slice()[i * c + from..i * c + to]
                                .copy_from_slice(&g.as_slice()[i * w..(i + 1) * w]);
                        }
                        accum(&mut before[a.0], ga);
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.value.cols();
                    let t = node.value.rows();
                    let mut off = 0;
                    for p in parts.clone() {
                        let w = before[p.0].value.cols();
                        if before[p.0].needs_grad {
                            let mut gp = Tensor::zeros(&[t, w]);
                            for i in 0..t {
                                gp.as_mut_slice()[i * w..(i + 1) * w]
                                    .copy_from_slice(&g.as_slice()[i * total + off..i * total + off + w]);
                            }
                            accum(&mut before[p.0], gp);
                        }
                        off += w;
                    }
                }
                Op::Embed { table, ids } => {
                    let table = *table;
                    if before[table.0].needs_grad {
                        let (v, d) = (before[table.0].value.rows(), before[table.0].value.cols());
                        let mut gt = Tensor::zeros(&[v, d]);
                        for (i, id) in ids.iter().enumerate() {
                            let dst = &mut gt.as_mut_slice()[*id as usize * d..(*id as usize + 1) * d];
                            for (x, y) in dst.iter_mut().zip(&g.as_slice()[i * d..(i + 1) * d]) {
                                *x += *y;
                            }
                        }
                        accum(&mut before[table.0], gt);
                    }
                }
                Op::Dropout { a, mask } => {
                    let a = *a;
                    if before[a.0].needs_grad {
                        let mut ga = g;
                        for (x, m) in ga.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                            *x *= *m;
                        }
                        accum(&mut before[a.0], ga);
                    }
                }
                Op::CeMasked { logits, targets, mask } => {
                    let logits = *logits;
                    if before[logits.0].needs_grad {
                        let probs = node.saved.as_ref().expect("ce saved probs");
                        let up = g.as_slice()[0];
                        let gl = k::ce_masked_backward(probs, targets, mask, up);
                        accum(&mut before[logits.0], gl);
                    }
                }
                Op::Sum { a } => {
                    let a = *a;
                    if before[a.0].needs_grad {
                        let mut ga = Tensor::zeros(before[a.0].value.shape());
                        ga.fill(g.as_slice()[0]);
                        accum(&mut before[a.0], ga);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accum<T: Scalar>(node: &mut Node<T>, g: Tensor<T>) {
    match &mut node.grad {
        Some(acc) => acc.add_scaled_assign(&g, T::ONE),
        slot @ None => *slot = Some(g),
    }
}
