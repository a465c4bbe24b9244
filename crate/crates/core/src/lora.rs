//! The temporary low-rank adapter.
//!
//! A set of rank-`r` factor pairs `(A, B)` hung off chosen projection
//! matrices of a frozen base model. The adapted projection is
//! `y = x W + (alpha / r) · (x A) B`, with `B` initialized to zero so a fresh
//! adapter is an exact identity on the model's behavior.
//!
//! During long-text work the adapter is trained *chunk by chunk on the text
//! the model itself has already produced* (or, for scoring, the text it has
//! already read): each call to [`LoraAdapter::train_chunk`] runs a few
//! optimizer steps on the newest chunk conditioned on the tokens just before
//! it, bumps the adapter version, and keeps optimizer momentum for the next
//! chunk. Destroying the adapter (dropping it) restores the base model
//! exactly — base weights are never touched.

use crate::error::{Error, Result};
use crate::model::{train, ModelParams};
use crate::rng;
use crate::tensor::optim::{AdamW, AdamWConfig};
use crate::tensor::tape::Graph;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Projections an adapter can attach to.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
pub enum Target {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

pub const N_TARGET_KINDS: usize = 7;

impl Target {
    pub fn index(self) -> usize {
        match self {
            Target::Q => 0,
            Target::K => 1,
            Target::V => 2,
            Target::O => 3,
            Target::Gate => 4,
            Target::Up => 5,
            Target::Down => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
            Target::Gate => "gate",
            Target::Up => "up",
            Target::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "q" => Ok(Target::Q),
            "k" => Ok(Target::K),
            "v" => Ok(Target::V),
            "o" => Ok(Target::O),
            "gate" => Ok(Target::Gate),
            "up" => Ok(Target::Up),
            "down" => Ok(Target::Down),
            other => Err(Error::config(format!(
                "unknown adapter target `{other}` (expected q, k, v, o, gate, up, down)"
            ))),
        }
    }

    fn from_index(i: u8) -> Result<Self> {
        Ok(match i {
            0 => Target::Q,
            1 => Target::K,
            2 => Target::V,
            3 => Target::O,
            4 => Target::Gate,
            5 => Target::Up,
            6 => Target::Down,
            _ => return Err(Error::runtime(format!("bad target code {i} in adapter file"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f64,
    pub targets: Vec<Target>,
    /// Passes over each chunk when training.
    pub epochs: u32,
    pub lr: f32,
    /// Linear learning-rate ramp over the first this-many chunk updates.
    pub warmup_chunks: u32,
    /// Tokens per optimizer step; 0 trains the whole chunk in one step.
    pub batch_tokens: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            dropout: 0.05,
            targets: vec![Target::Q, Target::K, Target::V, Target::O],
            epochs: 2,
            lr: 5e-4,
            warmup_chunks: 2,
            batch_tokens: 0,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::config("adapter alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("adapter dropout must lie in [0, 1)"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("adapter needs at least one target projection"));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if self.targets[..i].contains(t) {
                return Err(Error::config(format!("duplicate adapter target `{}`", t.name())));
            }
        }
        if self.epochs == 0 {
            return Err(Error::config("training epochs must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config("adapter learning rate must be positive"));
        }
        if self.batch_tokens == 1 {
            return Err(Error::config("batch_tokens must be 0 (whole chunk) or at least 2"));
        }
        Ok(())
    }
}

/// One low-rank factor pair: `a: [in, r]`, `b: [r, out]`.
#[derive(Clone)]
pub struct LoraPair {
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
}

#[derive(Clone)]
pub(crate) struct LayerAdapters {
    pairs: [Option<LoraPair>; N_TARGET_KINDS],
}

/// Outcome of one chunk update.
#[derive(Clone, Copy, Debug)]
pub struct TrainStats {
    pub steps: u32,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Clone)]
pub struct LoraAdapter {
    pub cfg: LoraConfig,
    version: u32,
    chunk_updates: u32,
    seed: u64,
    pub(crate) layers: Vec<LayerAdapters>,
    opt: AdamW<f32>,
}

impl LoraAdapter {
    /// Attach a fresh adapter to a model: `A` gaussian (std 0.02), `B` zero,
    /// so the adapted model is initially identical to the base model.
    pub fn attach(model: &ModelParams, cfg: LoraConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = model.cfg.d_model;
        let dff = model.cfg.d_ff;
        let mut r = rng::derive(seed, "lora.init");
        let mut layers = Vec::with_capacity(model.cfg.n_layers);
        for _ in 0..model.cfg.n_layers {
            let mut pairs: [Option<LoraPair>; N_TARGET_KINDS] = Default::default();
            for t in &cfg.targets {
                let (din, dout) = match t {
                    Target::Q | Target::K | Target::V | Target::O => (d, d),
                    Target::Gate | Target::Up => (d, dff),
                    Target::Down => (dff, d),
                };
                pairs[t.index()] = Some(LoraPair {
                    a: Tensor::randn(&mut r, &[din, cfg.rank], 0.02),
                    b: Tensor::zeros(&[cfg.rank, dout]),
                });
            }
            layers.push(LayerAdapters { pairs });
        }
        let opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        });
        Ok(LoraAdapter { cfg, version: 0, chunk_updates: 0, seed, layers, opt })
    }

    /// Number of completed chunk updates; starts at 0 and increments once
    /// per [`train_chunk`](Self::train_chunk).
    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pair(&self, layer: usize, t: Target) -> Option<&LoraPair> {
        self.layers[layer].pairs[t.index()].as_ref()
    }

    /// Mutable access to one low-rank pair, e.g. for custom initialization.
    pub fn pair_mut(&mut self, layer: usize, t: Target) -> Option<&mut LoraPair> {
        self.layers[layer].pairs[t.index()].as_mut()
    }

    /// True while every `B` factor is zero (the adapter acts as an identity).
    pub fn delta_is_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.pairs.iter().flatten().all(|p| p.b.as_slice().iter().all(|v| *v == 0.0))
        })
    }

    /// Trainable tensors with stable names, in the fixed roster order
    /// (layer-major, then the configured target order, `a` before `b`).
    pub fn named(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for t in &self.cfg.targets {
                let p = l.pairs[t.index()].as_ref().expect("configured target present");
                out.push((format!("layers.{i}.{}.a", t.name()), &p.a));
                out.push((format!("layers.{i}.{}.b", t.name()), &p.b));
            }
        }
        out
    }

    fn named_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        collect_trainable(&mut self.layers, &self.cfg.targets)
    }

    pub fn n_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// One chunk update: `epochs` passes over `chunk`, each pass split into
    /// `batch_tokens`-sized steps (whole chunk if 0). Every step feeds
    /// `[recent context ++ sub-chunk]` through the model on the tape and
    /// takes the loss only on sub-chunk positions. The learning rate ramps
    /// linearly over the first `warmup_chunks` chunk updates.
    ///
    /// `context` must already be clipped to the training-context budget;
    /// `context.len() + chunk.len()` has to fit the model window.
    pub fn train_chunk(&mut self, model: &ModelParams, context: &[u32], chunk: &[u32]) -> Result<TrainStats> {
        if chunk.is_empty() {
            return Err(Error::runtime("refusing to train on an empty chunk"));
        }
        let window = model.cfg.window;
        if context.len() + chunk.len() > window {
            return Err(Error::runtime(format!(
                "training sequence {} + {} exceeds window {window}",
                context.len(),
                chunk.len()
            )));
        }
        let ctx_budget = context.len();
        let batch = if self.cfg.batch_tokens == 0 { chunk.len() } else { self.cfg.batch_tokens.min(chunk.len()) };
        let n_sub = chunk.len().div_ceil(batch);
        let total_steps = self.cfg.epochs as usize * n_sub;
        let mut done_steps = 0usize;
        let mut first_loss = f64::NAN;
        let mut last_loss = f64::NAN;
        let mut steps_taken = 0u32;

        for epoch in 0..self.cfg.epochs {
            for si in 0..n_sub {
                let s0 = si * batch;
                let s1 = ((si + 1) * batch).min(chunk.len());
                // Context for this step: the tokens immediately before the
                // sub-chunk, drawn first from the chunk itself and then from
                // the provided context, clipped to the same budget.
                let mut seq: Vec<u32> = Vec::with_capacity(ctx_budget + (s1 - s0));
                let from_chunk = s0.min(ctx_budget);
                let from_ctx = ctx_budget - from_chunk;
                seq.extend_from_slice(&context[context.len() - from_ctx..]);
                seq.extend_from_slice(&chunk[s0 - from_chunk..s1]);
                let loss_from = seq.len() - (s1 - s0);
                done_steps += 1;
                if seq.len() < 2 {
                    continue; // single token, nothing to predict
                }

                let lr_scale = if self.chunk_updates >= self.cfg.warmup_chunks {
                    1.0
                } else {
                    let frac = done_steps as f64 / total_steps as f64;
                    (((self.chunk_updates as f64) + frac) / self.cfg.warmup_chunks as f64).min(1.0)
                };

                let key = ((self.version as u64) << 24) | ((epoch as u64) << 12) | (si as u64);
                let mut drop_rng = rng::derive_indexed(self.seed, "lora.dropout", key);

                let mut g = Graph::new();
                let (loss_id, binding) = train::loss_on_tape(
                    &mut g,
                    model,
                    Some(self),
                    &seq,
                    loss_from,
                    false,
                    Some(&mut drop_rng),
                )?;
                let loss = g.value(loss_id).as_slice()[0] as f64;
                if !loss.is_finite() {
                    return Err(Error::runtime(format!("non-finite training loss {loss}")));
                }
                if first_loss.is_nan() {
                    first_loss = loss;
                }
                last_loss = loss;
                g.backward(loss_id)?;

                let zero_shapes: Vec<Vec<usize>> = binding
                    .adapter
                    .iter()
                    .map(|id| g.value(*id).shape().to_vec())
                    .collect();
                let grads: Vec<Tensor<f32>> = binding
                    .adapter
                    .iter()
                    .zip(zero_shapes.iter())
                    .map(|(id, shape)| match g.grad(*id) {
                        Some(t) => t.clone(),
                        None => Tensor::zeros(shape),
                    })
                    .collect();
                let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
                let mut param_refs = collect_trainable(&mut self.layers, &self.cfg.targets);
                self.opt.step(&mut param_refs, &grad_refs, lr_scale as f32);
                steps_taken += 1;
            }
        }
        self.version += 1;
        self.chunk_updates += 1;
        Ok(TrainStats { steps: steps_taken, first_loss, last_loss })
    }

    /// Write the adapter weights (not optimizer state) to a binary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(format!("write {}", path.display()), e);
        w.write_all(b"TLAD").map_err(io)?;
        w.write_all(&1u32.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.cfg.rank as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&self.cfg.alpha.to_le_bytes()).map_err(io)?;
        w.write_all(&self.cfg.dropout.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.cfg.targets.len() as u32).to_le_bytes()).map_err(io)?;
        for t in &self.cfg.targets {
            w.write_all(&[t.index() as u8]).map_err(io)?;
        }
        w.write_all(&self.cfg.epochs.to_le_bytes()).map_err(io)?;
        w.write_all(&self.cfg.lr.to_le_bytes()).map_err(io)?;
        w.write_all(&self.cfg.warmup_chunks.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.cfg.batch_tokens as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&self.version.to_le_bytes()).map_err(io)?;
        w.write_all(&self.chunk_updates.to_le_bytes()).map_err(io)?;
        w.write_all(&self.seed.to_le_bytes()).map_err(io)?;
        for (_, t) in self.named() {
            for v in t.as_slice() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Load an adapter saved with [`save`](Self::save). The model decides the
    /// factor shapes; mismatches are reported as runtime errors. Optimizer
    /// state starts fresh.
    pub fn load(path: &Path, model: &ModelParams) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        let mut r = BufReader::new(f);
        let io = |e| Error::io(format!("read {}", path.display()), e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != b"TLAD" {
            return Err(Error::runtime(format!("{} is not an adapter file", path.display())));
        }
        let ver = read_u32(&mut r).map_err(io)?;
        if ver != 1 {
            return Err(Error::runtime(format!("unsupported adapter file version {ver}")));
        }
        let rank = read_u32(&mut r).map_err(io)? as usize;
        let alpha = f32::from_le_bytes(read_arr(&mut r).map_err(io)?);
        let dropout = f64::from_le_bytes(read_arr(&mut r).map_err(io)?);
        let n_targets = read_u32(&mut r).map_err(io)? as usize;
        let mut targets = Vec::with_capacity(n_targets);
        for _ in 0..n_targets {
            let mut b = [0u8; 1];
            r.read_exact(&mut b).map_err(io)?;
            targets.push(Target::from_index(b[0])?);
        }
        let epochs = read_u32(&mut r).map_err(io)?;
        let lr = f32::from_le_bytes(read_arr(&mut r).map_err(io)?);
        let warmup_chunks = read_u32(&mut r).map_err(io)?;
        let batch_tokens = read_u32(&mut r).map_err(io)? as usize;
        let n_layers = read_u32(&mut r).map_err(io)? as usize;
        if n_layers != model.cfg.n_layers {
            return Err(Error::runtime(format!(
                "adapter has {n_layers} layers, model has {}",
                model.cfg.n_layers
            )));
        }
        let version = read_u32(&mut r).map_err(io)?;
        let chunk_updates = read_u32(&mut r).map_err(io)?;
        let seed = u64::from_le_bytes(read_arr(&mut r).map_err(io)?);
        let cfg = LoraConfig { rank, alpha, dropout, targets, epochs, lr, warmup_chunks, batch_tokens };
        let mut adapter = LoraAdapter::attach(model, cfg, seed)?;
        adapter.version = version;
        adapter.chunk_updates = chunk_updates;
        for p in adapter.named_mut() {
            for v in p.as_mut_slice() {
                *v = f32::from_le_bytes(read_arr(&mut r).map_err(io)?);
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(Error::runtime(format!("{}: trailing bytes after adapter data", path.display())));
        }
        Ok(adapter)
    }
}

/// Mutable references to the trainable factors in roster order
/// (layer-major, configured target order, `a` before `b`). Free function so
/// the optimizer (a sibling field) can be borrowed at the same time.
fn collect_trainable<'l>(layers: &'l mut [LayerAdapters], targets: &[Target]) -> Vec<&'l mut Tensor<f32>> {
    let mut out = Vec::new();
    for l in layers.iter_mut() {
        let mut slots: Vec<Option<&mut LoraPair>> =
            l.pairs.each_mut().into_iter().map(|s| s.as_mut()).collect();
        for t in targets {
            let LoraPair { a, b } = slots[t.index()].take().expect("configured target present");
            out.push(a);
            out.push(b);
        }
    }
    out
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_arr<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}
