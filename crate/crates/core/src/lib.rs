//! Long-text generation with a temporary low-rank adapter.
//!
//! The idea: instead of widening a transformer's attention window to cover a
//! whole book, store the distant context *in the weights*. As text is
//! produced chunk by chunk, a small low-rank adapter is trained on the chunks
//! already emitted; the base model stays frozen, the attention window stays
//! short, and the adapter is thrown away when the document is finished.
//!
//! The crate is a self-contained miniature stack for studying that scheme on
//! a desk machine:
//!
//! * [`tensor`] — dense `f32`/`f64` tensors, BLAS-backed matmul, reverse-mode
//!   autodiff, AdamW; all memory accounted deterministically ([`mem`]).
//! * [`model`] — a small decoder-only transformer (RMS norm, rotary
//!   positions, gated FFN) with a KV cache supporting sliding-window
//!   recomputation, cache reuse across adapter swaps, and pinned attention
//!   sinks; binary checkpoints.
//! * [`lora`] — the temporary adapter: attach, train on a chunk, merge into
//!   the forward pass, destroy.
//! * [`engine`] — chunked generation and teacher-forced scoring loops that
//!   train the adapter on previously produced text, plus a two-thread
//!   deployment where training overlaps generation.
//! * [`eval`] — sliding-window perplexity, positional segment reports, BLEU,
//!   relative-change tables.
//! * [`corpus`] — synthetic corpora with measurable long-range structure and
//!   base-model pretraining.
//! * [`bench`] — window/chunk/training-cost sweeps with deterministic memory
//!   and latency accounting.

pub mod engine;
pub mod eval;
pub mod error;
pub mod lora;
pub mod mem;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
