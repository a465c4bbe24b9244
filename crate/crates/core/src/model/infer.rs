//! Incremental, cache-backed forward pass (no gradients).
//!
//! One code path serves batched prefill and single-token decode: feed `t`
//! tokens, get `t` rows of logits, with keys/values appended to the cache.
//! The adapter, if any, is merged into each projection on the fly; inference
//! never applies dropout.
//!
//! Attention is computed head by head with strided matrix multiplies
//! directly over the cache buffers — no per-head copies of K or V in rotated
//! mode. In sink mode the stored keys are unrotated, so a rotated copy is
//! materialized per layer with positions equal to the current *slot* indices;
//! that is what makes eviction position-consistent.

use super::cache::KvCache;
use super::ModelParams;
use crate::lora::{LoraAdapter, Target};
use crate::tensor::kernels as k;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy)]
pub struct Forward<'a> {
    pub params: &'a ModelParams,
    pub adapter: Option<&'a LoraAdapter>,
    /// Context-extension factor for rotary scaling; 1.0 leaves the base
    /// frequency untouched. Used by the long-window contrast baseline.
    pub ntk_scale: f64,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Forward { params, adapter: None, ntk_scale: 1.0 }
    }

    pub fn with_adapter(params: &'a ModelParams, adapter: Option<&'a LoraAdapter>) -> Self {
        Forward { params, adapter, ntk_scale: 1.0 }
    }

    /// Matching cache for this model (rotated storage).
    pub fn new_cache(&self) -> KvCache {
        let c = &self.params.cfg;
        KvCache::new(c.n_layers, c.d_model, c.window)
    }

    /// Matching cache with `sinks` pinned slots (unrotated storage).
    pub fn new_sink_cache(&self, sinks: usize) -> KvCache {
        let c = &self.params.cfg;
        KvCache::new_sink(c.n_layers, c.d_model, c.window, sinks)
    }

    fn project(&self, x: &Tensor<f32>, w: &Tensor<f32>, layer: usize, t: Target) -> Tensor<f32> {
        let mut y = k::matmul(x, w);
        if let Some(ad) = self.adapter {
            if let Some(pair) = ad.pair(layer, t) {
                let xa = k::matmul(x, &pair.a);
                let xab = k::matmul(&xa, &pair.b);
                y.add_scaled_assign(&xab, ad.cfg.scaling());
            }
        }
        y
    }

    /// Feed `tokens`, appending their keys/values to `cache`, and return the
    /// logits for every fed position (`[t, vocab]`). Row `i` predicts the
    /// token after `tokens[i]`.
    pub fn prefill(&self, cache: &mut KvCache, tokens: &[u32]) -> Tensor<f32> {
        let cfg = &self.params.cfg;
        let t = tokens.len();
        assert!(t > 0, "prefill needs at least one token");
        assert!(
            cache.len() + t <= cache.capacity(),
            "prefill of {t} overflows cache {}/{}",
            cache.len(),
            cache.capacity()
        );
        let old = cache.len();
        let span = old + t;
        let (d, nh) = (cfg.d_model, cfg.n_heads);
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        let sink = cache.is_sink_mode();

        // Rotary positions of the fed rows: absolute in rotated mode, slot
        // indices in sink mode.
        let q_pos: Vec<usize> = if sink {
            (old..old + t).collect()
        } else {
            (cache.next_position()..cache.next_position() + t).collect()
        };
        let slot_pos: Vec<usize> = if sink { (0..span).collect() } else { Vec::new() };

        let mut x = k::embed_rows(&self.params.embed, tokens);
        for (l, layer) in self.params.layers.iter().enumerate() {
            let (xn, _) = k::rmsnorm_rows(&x, &layer.attn_norm, cfg.rms_eps);
            let mut q = self.project(&xn, &layer.wq, l, Target::Q);
            let mut kk = self.project(&xn, &layer.wk, l, Target::K);
            let v = self.project(&xn, &layer.wv, l, Target::V);
            k::rope_rows_inplace(&mut q, nh, &q_pos, cfg.rope_base, self.ntk_scale, false);
            if !sink {
                k::rope_rows_inplace(&mut kk, nh, &q_pos, cfg.rope_base, self.ntk_scale, false);
            }
            cache.write_rows(l, kk.as_slice(), v.as_slice());

            // Key view over the whole span. Sink mode rotates a copy by slot.
            let roped;
            let kbuf: &[f32] = if sink {
                let mut kr = Tensor::from_vec(&[span, d], cache.k_rows_upto(l, span).to_vec());
                k::rope_rows_inplace(&mut kr, nh, &slot_pos, cfg.rope_base, self.ntk_scale, false);
                roped = kr;
                roped.as_slice()
            } else {
                cache.k_rows_upto(l, span)
            };
            let vbuf = cache.v_rows_upto(l, span);

            let mut ctx = Tensor::zeros(&[t, d]);
            for h in 0..nh {
                let off = h * dh;
                let mut s = Tensor::zeros(&[t, span]);
                f32::gemm_strided(
                    t, dh, span,
                    inv_sqrt,
                    &q.as_slice()[off..], d as isize, 1,
                    &kbuf[off..], 1, d as isize,
                    0.0,
                    s.as_mut_slice(), span as isize, 1,
                );
                let p = k::softmax_causal_rows(&s, old);
                f32::gemm_strided(
                    t, span, dh,
                    1.0,
                    p.as_slice(), span as isize, 1,
                    &vbuf[off..], d as isize, 1,
                    0.0,
                    &mut ctx.as_mut_slice()[off..], d as isize, 1,
                );
            }
            let attn = self.project(&ctx, &layer.wo, l, Target::O);
            x.add_scaled_assign(&attn, 1.0);

            let (xn2, _) = k::rmsnorm_rows(&x, &layer.ffn_norm, cfg.rms_eps);
            let gate = k::silu(&self.project(&xn2, &layer.w_gate, l, Target::Gate));
            let mut up = self.project(&xn2, &layer.w_up, l, Target::Up);
            for (u, gv) in up.as_mut_slice().iter_mut().zip(gate.as_slice()) {
                *u *= *gv;
            }
            let ffn = self.project(&up, &layer.w_down, l, Target::Down);
            x.add_scaled_assign(&ffn, 1.0);
        }
        cache.advance(t);
        let (h, _) = k::rmsnorm_rows(&x, &self.params.final_norm, cfg.rms_eps);
        k::matmul(&h, &self.params.head)
    }

    /// Feed one token and return its logits row.
    pub fn decode_one(&self, cache: &mut KvCache, token: u32) -> Vec<f32> {
        let logits = self.prefill(cache, &[token]);
        logits.as_slice().to_vec()
    }

    /// Rebuild the cache from scratch over `keep`: positions restart at zero
    /// and every key/value is recomputed with the current adapter. Returns
    /// the prefill logits (the last row predicts the next token).
    pub fn slide_and_recompute(&self, cache: &mut KvCache, keep: &[u32]) -> Tensor<f32> {
        cache.clear();
        self.prefill(cache, keep)
    }
}
