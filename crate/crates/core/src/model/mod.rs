//! A miniature decoder-only transformer.
//!
//! Pre-norm blocks with RMS normalization, rotary position embeddings,
//! multi-head causal attention, a gated SiLU feed-forward, and an untied
//! output head. Two forward implementations share the same math kernels:
//!
//! * [`infer`] — incremental, cache-backed, allocation-light; used for
//!   generation and scoring. Never records gradients.
//! * [`train`] — builds the whole computation on the autodiff tape for a
//!   full sequence; used for adapter updates and base pretraining.
//!
//! Equality of the two paths (to float tolerance) is asserted by the
//! integration suite.

pub mod cache;
pub mod checkpoint;
pub mod infer;
pub mod train;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Architecture hyper-parameters. `window` is the attention budget: the KV
/// cache never holds more than this many entries, and training sequences
/// never exceed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub window: usize,
    pub rope_base: f64,
    pub rms_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 2048,
            d_model: 256,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            window: 512,
            rope_base: 10_000.0,
            rms_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(Error::config("vocab must be at least 4"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let hd = self.head_dim();
        if hd < 4 || !hd.is_multiple_of(2) {
            return Err(Error::config(format!("head dim {hd} must be even and at least 4")));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::config("n_layers and d_ff must be positive"));
        }
        if self.window < 8 {
            return Err(Error::config("window must be at least 8"));
        }
        if !self.rope_base.is_finite() || self.rope_base <= 1.0 {
            return Err(Error::config("rope_base must exceed 1"));
        }
        if !self.rms_eps.is_finite() || self.rms_eps <= 0.0 {
            return Err(Error::config("rms_eps must be positive"));
        }
        Ok(())
    }
}

/// Per-layer weights. Projections are stored row-major as `[in, out]` so the
/// forward pass is a plain `x @ w`.
pub struct LayerParams {
    pub attn_norm: Tensor<f32>, // [d]
    pub wq: Tensor<f32>,        // [d, d]
    pub wk: Tensor<f32>,
    pub wv: Tensor<f32>,
    pub wo: Tensor<f32>,
    pub ffn_norm: Tensor<f32>, // [d]
    pub w_gate: Tensor<f32>,   // [d, d_ff]
    pub w_up: Tensor<f32>,     // [d, d_ff]
    pub w_down: Tensor<f32>,   // [d_ff, d]
}

/// Full parameter set plus its config.
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub embed: Tensor<f32>, // [vocab, d]
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor<f32>, // [d]
    pub head: Tensor<f32>,       // [d, vocab]
}

impl ModelParams {
    /// Fresh random initialization: all weight matrices gaussian with
    /// standard deviation 0.02, norm gains at one. Deterministic in
    /// `(cfg, seed)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::derive(seed, "model.init");
        let d = cfg.d_model;
        let std = 0.02;
        let embed = Tensor::randn(&mut r, &[cfg.vocab, d], std);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                attn_norm: Tensor::full(&[d], 1.0),
                wq: Tensor::randn(&mut r, &[d, d], std),
                wk: Tensor::randn(&mut r, &[d, d], std),
                wv: Tensor::randn(&mut r, &[d, d], std),
                wo: Tensor::randn(&mut r, &[d, d], std),
                ffn_norm: Tensor::full(&[d], 1.0),
                w_gate: Tensor::randn(&mut r, &[d, cfg.d_ff], std),
                w_up: Tensor::randn(&mut r, &[d, cfg.d_ff], std),
                w_down: Tensor::randn(&mut r, &[cfg.d_ff, d], std),
            });
        }
        let final_norm = Tensor::full(&[d], 1.0);
        let head = Tensor::randn(&mut r, &[d, cfg.vocab], std);
        Ok(ModelParams { cfg: cfg.clone(), embed, layers, final_norm, head })
    }

    /// All parameters with stable names, in the fixed serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> = vec![("embed".into(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable view in the same order as [`named`](Self::named).
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out: Vec<(String, &mut Tensor<f32>)> = vec![("embed".into(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &mut l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), &mut l.w_gate));
            out.push((format!("layers.{i}.w_up"), &mut l.w_up));
            out.push((format!("layers.{i}.w_down"), &mut l.w_down));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over the config and every parameter byte, as lowercase hex.
    /// Two models with equal checksums are bit-identical.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for v in t.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

impl std::fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelParams")
            .field("cfg", &self.cfg)
            .field("n_parameters", &self.n_parameters())
            .finish_non_exhaustive()
    }
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        ModelParams {
            cfg: self.cfg.clone(),
            embed: self.embed.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.clone(),
                    wq: l.wq.clone(),
                    wk: l.wk.clone(),
                    wv: l.wv.clone(),
                    wo: l.wo.clone(),
                    ffn_norm: l.ffn_norm.clone(),
                    w_gate: l.w_gate.clone(),
                    w_up: l.w_up.clone(),
                    w_down: l.w_down.clone(),
                })
                .collect(),
            final_norm: self.final_norm.clone(),
            head: self.head.clone(),
        }
    }
}
