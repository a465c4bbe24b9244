//! Deterministic memory accounting for tensor buffers.
//!
//! Every tensor allocation in the crate registers its byte size with a
//! thread-local counter, and deallocations subtract it. `live_bytes` and
//! `peak_bytes` therefore reflect exactly the engine's own working set —
//! weights, KV caches, activations, optimizer state — independent of
//! allocator slack or what the OS reports. Benchmarks reset the peak, run a
//! workload, and read it back; the numbers are reproducible across runs and
//! machines.
//!
//! The counters are thread-local on purpose: a benchmark thread observes only
//! its own allocations, so a trainer running on a sibling thread does not
//! perturb a generation-latency measurement.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: usize) {
    LIVE.with(|l| {
        let now = l.get() + bytes;
        l.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

pub(crate) fn on_free(bytes: usize) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// Bytes currently held by tensor buffers on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(|l| l.get())
}

/// High-water mark of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(|p| p.get())
}

/// Reset the peak to the current live figure.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_free_cycle_restores_live_and_records_peak() {
        let base = live_bytes();
        reset_peak();
        on_alloc(1024);
        assert_eq!(live_bytes(), base + 1024);
        on_alloc(4096);
        assert_eq!(live_bytes(), base + 5120);
        on_free(4096);
        on_free(1024);
        assert_eq!(live_bytes(), base);
        assert!(peak_bytes() >= base + 5120);
    }
}
