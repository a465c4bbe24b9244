//! AdamW with decoupled weight decay.
//!
//! Moment buffers are created lazily on the first step and persist for the
//! optimizer's lifetime, so a long-running training loop (one step per text
//! chunk, for instance) keeps its momentum across calls. Learning-rate
//! warmup is the caller's concern: pass a scale factor per step.

use super::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Scalar> Default for AdamWConfig<T> {
    fn default() -> Self {
        AdamWConfig {
            lr: T::from_f64(1e-3),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay: T::ZERO,
        }
    }
}

#[derive(Clone)]
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig<T>,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig<T>) -> Self {
        AdamW { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over a fixed roster of parameters. The roster (count and
    /// shapes) must be identical on every call; `lr_scale` multiplies the
    /// configured learning rate (warmup ramps pass values in `(0, 1]`).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr_scale: T) {
        assert_eq!(params.len(), grads.len(), "params/grads roster mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer roster changed size");
        self.step += 1;
        let t = self.step;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = T::ONE - powi(b1, t);
        let bc2 = T::ONE - powi(b2, t);
        let lr = self.cfg.lr * lr_scale;
        let wd = self.cfg.weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            assert_eq!(p.shape(), m.shape(), "optimizer roster changed shape");
            let ps = p.as_mut_slice();
            let gs = g.as_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for i in 0..ps.len() {
                ms[i] = b1 * ms[i] + (T::ONE - b1) * gs[i];
                vs[i] = b2 * vs[i] + (T::ONE - b2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                // Decoupled decay: applied to the parameter directly, not
                // through the adaptive term.
                ps[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + wd * ps[i]);
            }
        }
    }
}

fn powi<T: Scalar>(base: T, exp: u64) -> T {
    let mut acc = T::ONE;
    let mut b = base;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    acc
}
