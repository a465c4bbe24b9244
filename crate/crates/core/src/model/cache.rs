//! Key/value cache for incremental decoding, with two storage disciplines.
//!
//! **Rotated mode** (the default): keys are stored *after* rotary embedding,
//! at their absolute positions. Growing past capacity is handled by the
//! caller rebuilding the cache from recent tokens (`slide + recompute`),
//! after which positions restart at zero.
//!
//! **Sink mode**: the first `sinks` entries are pinned forever and keys are
//! stored *unrotated*; the forward pass applies rotary embedding by slot
//! index at attention time. Eviction ([`KvCache::sink_evict`]) drops rows
//! after the pinned prefix and shifts the tail down, which implicitly
//! re-anchors every retained token's position to its new slot — exactly the
//! behavior of a fresh forward pass over the retained tokens, with no
//! recomputation.

use crate::tensor::Tensor;

pub struct KvCache {
    n_layers: usize,
    d_model: usize,
    capacity: usize,
    k: Vec<Tensor<f32>>, // per layer, [capacity, d_model]
    v: Vec<Tensor<f32>>,
    len: usize,
    /// Absolute rotary position assigned to the next appended row
    /// (rotated mode only; sink mode positions are slot indices).
    next_pos: usize,
    sinks: usize,
}

impl KvCache {
    /// Rotated-storage cache (slide + recompute discipline).
    pub fn new(n_layers: usize, d_model: usize, capacity: usize) -> Self {
        Self::build(n_layers, d_model, capacity, 0)
    }

    /// Sink-mode cache: `sinks` initial entries are pinned and storage is
    /// unrotated.
    pub fn new_sink(n_layers: usize, d_model: usize, capacity: usize, sinks: usize) -> Self {
        assert!(sinks >= 1, "sink cache needs at least one pinned slot");
        assert!(sinks < capacity, "pinned slots must leave room for the window");
        Self::build(n_layers, d_model, capacity, sinks)
    }

    fn build(n_layers: usize, d_model: usize, capacity: usize, sinks: usize) -> Self {
        assert!(capacity > 0 && n_layers > 0 && d_model > 0);
        KvCache {
            n_layers,
            d_model,
            capacity,
            k: (0..n_layers).map(|_| Tensor::zeros(&[capacity, d_model])).collect(),
            v: (0..n_layers).map(|_| Tensor::zeros(&[capacity, d_model])).collect(),
            len: 0,
            next_pos: 0,
            sinks,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn sinks(&self) -> usize {
        self.sinks
    }

    pub fn is_sink_mode(&self) -> bool {
        self.sinks > 0
    }

    pub fn next_position(&self) -> usize {
        self.next_pos
    }

    /// Forget everything; positions restart at zero.
    pub fn clear(&mut self) {
        self.len = 0;
        self.next_pos = 0;
    }

    /// Key rows `[0..len)` of a layer as a flat row-major slice.
    pub fn k_rows(&self, layer: usize) -> &[f32] {
        &self.k[layer].as_slice()[..self.len * self.d_model]
    }

    pub fn v_rows(&self, layer: usize) -> &[f32] {
        &self.v[layer].as_slice()[..self.len * self.d_model]
    }

    /// Key rows `[0..n)` including rows written but not yet committed by
    /// [`advance`](Self::advance). The forward pass reads these mid-batch.
    pub(crate) fn k_rows_upto(&self, layer: usize, n: usize) -> &[f32] {
        &self.k[layer].as_slice()[..n * self.d_model]
    }

    pub(crate) fn v_rows_upto(&self, layer: usize, n: usize) -> &[f32] {
        &self.v[layer].as_slice()[..n * self.d_model]
    }

    /// Copy `t` rows into layer storage starting at the current end. Every
    /// layer must be written before [`advance`](Self::advance) commits them.
    pub(crate) fn write_rows(&mut self, layer: usize, k_new: &[f32], v_new: &[f32]) {
        let d = self.d_model;
        let t = k_new.len() / d;
        assert_eq!(k_new.len(), t * d);
        assert_eq!(v_new.len(), t * d);
        assert!(self.len + t <= self.capacity, "kv cache overflow: {} + {t} > {}", self.len, self.capacity);
        let at = self.len * d;
        self.k[layer].as_mut_slice()[at..at + t * d].copy_from_slice(k_new);
        self.v[layer].as_mut_slice()[at..at + t * d].copy_from_slice(v_new);
    }

    /// Commit `t` rows written to every layer.
    pub(crate) fn advance(&mut self, t: usize) {
        assert!(self.len + t <= self.capacity);
        self.len += t;
        self.next_pos += t;
    }

    /// Drop rows so that at most `window` remain: the pinned `sinks` prefix
    /// plus the newest `window - sinks` rows. Sink mode only. A no-op when
    /// already within the window.
    pub fn sink_evict(&mut self, window: usize) {
        assert!(self.is_sink_mode(), "eviction requires a sink-mode cache");
        assert!(window > self.sinks, "window {window} must exceed pinned {}", self.sinks);
        assert!(window <= self.capacity);
        if self.len <= window {
            return;
        }
        let keep_tail = window - self.sinks;
        let src_start = self.len - keep_tail; // > sinks here
        let d = self.d_model;
        for l in 0..self.n_layers {
            let ks = self.k[l].as_mut_slice();
            ks.copy_within(src_start * d..self.len * d, self.sinks * d);
            let vs = self.v[l].as_mut_slice();
            vs.copy_within(src_start * d..self.len * d, self.sinks * d);
        }
        self.len = window;
    }

    /// Bytes held by the cache buffers.
    pub fn bytes(&self) -> usize {
        self.n_layers * 2 * self.capacity * self.d_model * std::mem::size_of::<f32>()
    }
}

impl Clone for KvCache {
    fn clone(&self) -> Self {
        KvCache {
            n_layers: self.n_layers,
            d_model: self.d_model,
            capacity: self.capacity,
            k: self.k.clone(),
            v: self.v.clone(),
            len: self.len,
            next_pos: self.next_pos,
            sinks: self.sinks,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill_rows(c: &mut KvCache, from: usize, t: usize) {
        // Row value i encodes its original index so moves are observable.
        let d = 4;
        for l in 0..c.n_layers {
            let k: Vec<f32> = (0..t * d).map(|j| (from + j / d) as f32).collect();
            let v: Vec<f32> = k.iter().map(|x| x + 1000.0).collect();
            c.write_rows(l, &k, &v);
        }
        c.advance(t);
    }

    #[test]
    fn append_and_positions() {
        let mut c = KvCache::new(2, 4, 8);
        fill_rows(&mut c, 0, 3);
        assert_eq!(c.len(), 3);
        assert_eq!(c.next_position(), 3);
        fill_rows(&mut c, 3, 2);
        assert_eq!(c.len(), 5);
        assert_eq!(c.k_rows(0)[4 * 4], 4.0);
        c.clear();
        assert_eq!(c.len(), 0);
        assert_eq!(c.next_position(), 0);
    }

    #[test]
    fn sink_evict_keeps_pinned_prefix_and_newest_tail() {
        let mut c = KvCache::new_sink(1, 4, 10, 2);
        fill_rows(&mut c, 0, 10);
        c.sink_evict(6);
        assert_eq!(c.len(), 6);
        let rows: Vec<f32> = (0..6).map(|i| c.k_rows(0)[i * 4]).collect();
        // Pinned rows 0,1 then the newest 4 rows 6..10.
        assert_eq!(rows, vec![0.0, 1.0, 6.0, 7.0, 8.0, 9.0]);
        // Values moved in lockstep.
        assert_eq!(c.v_rows(0)[2 * 4], 1006.0);
    }

    #[test]
    fn sink_evict_is_noop_within_window() {
        let mut c = KvCache::new_sink(1, 4, 10, 2);
        fill_rows(&mut c, 0, 5);
        c.sink_evict(6);
        assert_eq!(c.len(), 5);
        let rows: Vec<f32> = (0..5).map(|i| c.k_rows(0)[i * 4]).collect();
        assert_eq!(rows, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "overflow")]
    fn overflow_panics() {
        let mut c = KvCache::new(1, 4, 4);
        fill_rows(&mut c, 0, 4);
        fill_rows(&mut c, 4, 1);
    }

    #[test]
    fn repeated_eviction_preserves_sinks_forever() {
        let mut c = KvCache::new_sink(1, 4, 8, 1);
        fill_rows(&mut c, 0, 8);
        for round in 0..5 {
            c.sink_evict(7); // make room for one
            fill_rows(&mut c, 8 + round, 1);
        }
        assert_eq!(c.k_rows(0)[0], 0.0, "sink row pinned across evictions");
        assert_eq!(c.len(), 8);
        // Newest row is the last appended.
        assert_eq!(c.k_rows(0)[7 * 4], 12.0);
    }
}
