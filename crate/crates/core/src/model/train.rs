//! Tape-recorded forward pass for training.
//!
//! Builds the same computation as [`super::infer`], but over a whole
//! sequence on the autodiff tape, with rotary positions starting at zero and
//! full causal attention within the sequence. Used for adapter chunk updates
//! (base frozen) and for base-model pretraining (base trainable).
//!
//! The integration suite asserts this path agrees with the cache-backed
//! inference path to float tolerance.

use super::ModelParams;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, Target, N_TARGET_KINDS};
use crate::tensor::tape::{Graph, NodeId};
use crate::tensor::Tensor;

/// Where each parameter landed on the tape, for gradient readback.
///
/// `base` follows [`ModelParams::named`] order; `adapter` follows
/// [`LoraAdapter::named`] order (`a` before `b` per target).
pub struct TapeBinding {
    pub base: Vec<NodeId>,
    pub adapter: Vec<NodeId>,
}

struct LayerIds {
    attn_norm: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ffn_norm: NodeId,
    w_gate: NodeId,
    w_up: NodeId,
    w_down: NodeId,
    pairs: [Option<(NodeId, NodeId)>; N_TARGET_KINDS],
}

fn register_leaf(g: &mut Graph<f32>, t: &Tensor<f32>, trainable: bool) -> NodeId {
    let mut c = t.clone();
    c.requires_grad = trainable;
    g.leaf(c)
}

/// Forward over `inputs` on the tape; returns the logits node (`[t, vocab]`)
/// and the parameter binding. `dropout_rng` enables adapter dropout (training
/// mode); pass `None` to evaluate deterministically.
pub fn logits_on_tape<R: rand::Rng>(
    g: &mut Graph<f32>,
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    inputs: &[u32],
    train_base: bool,
    mut dropout_rng: Option<&mut R>,
) -> Result<(NodeId, TapeBinding)> {
    let cfg = &params.cfg;
    let t = inputs.len();
    if t == 0 {
        return Err(Error::runtime("empty input sequence"));
    }
    if t > cfg.window {
        return Err(Error::runtime(format!("training sequence {t} exceeds window {}", cfg.window)));
    }

    // Register parameters in the stable roster order.
    let mut base = Vec::new();
    let embed = register_leaf(g, &params.embed, train_base);
    base.push(embed);
    let mut layer_ids = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let ids = LayerIds {
            attn_norm: register_leaf(g, &layer.attn_norm, train_base),
            wq: register_leaf(g, &layer.wq, train_base),
            wk: register_leaf(g, &layer.wk, train_base),
            wv: register_leaf(g, &layer.wv, train_base),
            wo: register_leaf(g, &layer.wo, train_base),
            ffn_norm: register_leaf(g, &layer.ffn_norm, train_base),
            w_gate: register_leaf(g, &layer.w_gate, train_base),
            w_up: register_leaf(g, &layer.w_up, train_base),
            w_down: register_leaf(g, &layer.w_down, train_base),
            pairs: [None; N_TARGET_KINDS],
        };
        base.push(ids.attn_norm);
        base.push(ids.wq);
        base.push(ids.wk);
        base.push(ids.wv);
        base.push(ids.wo);
        base.push(ids.ffn_norm);
        base.push(ids.w_gate);
        base.push(ids.w_up);
        base.push(ids.w_down);
        let _ = l;
        layer_ids.push(ids);
    }
    let final_norm = register_leaf(g, &params.final_norm, train_base);
    base.push(final_norm);
    let head = register_leaf(g, &params.head, train_base);
    base.push(head);

    let mut adapter_flat = Vec::new();
    if let Some(ad) = adapter {
        for (l, ids) in layer_ids.iter_mut().enumerate() {
            for target in &ad.cfg.targets {
                let pair = ad.pair(l, *target).expect("configured target present");
                let aid = register_leaf(g, &pair.a, true);
                let bid = register_leaf(g, &pair.b, true);
                ids.pairs[target.index()] = Some((aid, bid));
                adapter_flat.push(aid);
                adapter_flat.push(bid);
            }
        }
    }

    let scaling = adapter.map(|a| a.cfg.scaling()).unwrap_or(0.0);
    let drop_p = adapter.map(|a| a.cfg.dropout).unwrap_or(0.0);
    let positions: Vec<usize> = (0..t).collect();
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f32).sqrt();

    // Adapted projection: base matmul plus the scaled low-rank path, with
    // dropout on the low-rank input in training mode.
    let proj = |g: &mut Graph<f32>,
                    x: NodeId,
                    w: NodeId,
                    pair: Option<(NodeId, NodeId)>,
                    rng: &mut Option<&mut R>|
     -> NodeId {
        let y = g.matmul(x, w);
        match pair {
            None => y,
            Some((aid, bid)) => {
                let xin = match rng.as_deref_mut() {
                    Some(r) if drop_p > 0.0 => g.dropout(x, drop_p, r),
                    _ => x,
                };
                let xa = g.matmul(xin, aid);
                let xab = g.matmul(xa, bid);
                g.add_scaled(y, xab, scaling)
            }
        }
    };

    let mut x = g.embed(embed, inputs.to_vec());
    for ids in &layer_ids {
        let xn = g.rmsnorm(x, ids.attn_norm, cfg.rms_eps);
        let q0 = proj(g, xn, ids.wq, ids.pairs[Target::Q.index()], &mut dropout_rng);
        let k0 = proj(g, xn, ids.wk, ids.pairs[Target::K.index()], &mut dropout_rng);
        let v0 = proj(g, xn, ids.wv, ids.pairs[Target::V.index()], &mut dropout_rng);
        let q = g.rope(q0, nh, positions.clone(), cfg.rope_base, 1.0);
        let kr = g.rope(k0, nh, positions.clone(), cfg.rope_base, 1.0);

        let mut heads = Vec::with_capacity(nh);
        for h in 0..nh {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(kr, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v0, h * dh, (h + 1) * dh);
            let s = g.matmul_nt(qh, kh);
            let ss = g.scale(s, inv_sqrt);
            let p = g.softmax_causal(ss, 0);
            heads.push(g.matmul(p, vh));
        }
        let ctx = g.concat_cols(&heads);
        let attn = proj(g, ctx, ids.wo, ids.pairs[Target::O.index()], &mut dropout_rng);
        x = g.add(x, attn);

        let xn2 = g.rmsnorm(x, ids.ffn_norm, cfg.rms_eps);
        let gate0 = proj(g, xn2, ids.w_gate, ids.pairs[Target::Gate.index()], &mut dropout_rng);
        let gate = g.silu(gate0);
        let up = proj(g, xn2, ids.w_up, ids.pairs[Target::Up.index()], &mut dropout_rng);
        let prod = g.mul(gate, up);
        let ffn = proj(g, prod, ids.w_down, ids.pairs[Target::Down.index()], &mut dropout_rng);
        x = g.add(x, ffn);
    }
    let hfin = g.rmsnorm(x, final_norm, cfg.rms_eps);
    let logits = g.matmul(hfin, head);
    Ok((logits, TapeBinding { base, adapter: adapter_flat }))
}

/// Next-token cross-entropy over `tokens`, masked so that only predictions
/// of tokens at index `loss_from` and later count. Returns the scalar loss
/// node and the binding.
pub fn loss_on_tape<R: rand::Rng>(
    g: &mut Graph<f32>,
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    tokens: &[u32],
    loss_from: usize,
    train_base: bool,
    dropout_rng: Option<&mut R>,
) -> Result<(NodeId, TapeBinding)> {
    if tokens.len() < 2 {
        return Err(Error::runtime("need at least two tokens to form a prediction"));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets: Vec<u32> = tokens[1..].to_vec();
    let start = loss_from.max(1); // token 0 has no preceding context
    let mask: Vec<bool> = (0..targets.len()).map(|j| j + 1 >= start).collect();
    if !mask.iter().any(|m| *m) {
        return Err(Error::runtime(format!(
            "loss mask selects nothing: loss_from {loss_from} of {} tokens",
            tokens.len()
        )));
    }
    let (logits, binding) = logits_on_tape(g, params, adapter, inputs, train_base, dropout_rng)?;
    let loss = g.ce_masked(logits, targets, mask);
    Ok((loss, binding))
}
