//! Chunked generation and scoring with a progressively trained adapter.
//!
//! The driving idea: text is produced (or consumed) in fixed-size chunks;
//! every time a chunk completes, a temporary low-rank adapter is trained on
//! it, so information that has scrolled out of the attention window lives on
//! in the adapter weights. Training always happens **before** the first
//! prediction that follows the finished chunk, and a chunk is never trained
//! before all of its tokens have been produced — so a token's probability is
//! always measured by an adapter that has never seen that token's own chunk.
//!
//! Cache policy knobs:
//!
//! * `cache_reuse = false` — the windowed-recompute baseline: the KV cache is
//!   rebuilt from the most recent `input_budget` tokens at every chunk
//!   boundary (positions restart at zero).
//! * `cache_reuse = true` — cached KV states survive adapter swaps; the cache
//!   is only rebuilt when it physically runs out of room.
//! * `attention_sink = true` (requires cache reuse) — the first few tokens of
//!   the stream stay pinned in the cache and overflow is handled by evicting
//!   old entries in place, never by recomputation.
//!
//! Two deployments produce the same kind of output: `Cascaded` trains inline
//! between chunks; `Parallelized` trains on a second thread while generation
//! continues, adopting finished adapter versions according to a pacing
//! policy. Any run can be replayed deterministically from its recorded
//! version-per-token trace.

pub mod parallel;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::mem;
use crate::model::cache::KvCache;
use crate::model::infer::Forward;
use crate::model::{ModelConfig, ModelParams};
use crate::rng;
use crate::tensor::kernels;
use crate::tensor::Tensor;

pub use parallel::TrainerPacing;

/// Where adapter training runs relative to generation.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Deployment {
    /// Generation pauses at each chunk boundary while the adapter trains.
    Cascaded,
    /// A trainer thread updates the adapter while generation continues.
    Parallelized,
}

/// Token selection policy.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Sampling {
    /// 0 = greedy argmax; otherwise softmax temperature.
    pub temperature: f64,
    /// ≥ 1; logits of tokens already present in of the attention window are
    /// damped by this factor (divided when positive, multiplied when
    /// negative). 1 disables the penalty.
    pub repetition_penalty: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { temperature: 0.0, repetition_penalty: 1.12 }
    }
}

/// Knobs for one generation/scoring session.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Tokens per chunk: the adapter trains once per completed chunk.
    pub chunk_size: usize,
    /// Attention budget for already-seen tokens after a rebuild/eviction.
    /// 0 resolves to `window − chunk_size`.
    pub input_length: usize,
    /// Preceding tokens prepended as (loss-free) context to each training
    /// chunk.
    pub train_context: usize,
    /// Effective attention window for this run; 0 resolves to the model's
    /// window. May exceed the model window (for position-extension
    /// experiments) or undercut it (for small-window comparisons).
    pub window_override: usize,
    /// Keep cached KV states across adapter versions.
    pub cache_reuse: bool,
    /// Pin the first `n_sinks` tokens and evict in place instead of ever
    /// recomputing. Requires `cache_reuse`.
    pub attention_sink: bool,
    pub n_sinks: usize,
    /// Rotary position extension factor (≥ 1; 1 = off).
    pub ntk_scale: f64,
    pub deployment: Deployment,
    /// Adapter-adoption pacing for the parallelized deployment.
    pub pacing: TrainerPacing,
    pub sampling: Sampling,
    pub lora: LoraConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            chunk_size: 128,
            input_length: 0,
            train_context: 128,
            window_override: 0,
            cache_reuse: true,
            attention_sink: false,
            n_sinks: 4,
            ntk_scale: 1.0,
            deployment: Deployment::Cascaded,
            pacing: TrainerPacing::Realtime,
            sampling: Sampling::default(),
            lora: LoraConfig::default(),
        }
    }
}

/// Budgets after resolving the `0 = auto` fields against a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolvedBudgets {
    /// Effective attention window (cache capacity).
    pub window: usize,
    /// Tokens kept after a rebuild or eviction.
    pub input_budget: usize,
}

impl EngineConfig {
    /// Validate against a model and resolve the automatic budgets.
    pub fn resolve(&self, model: &ModelConfig) -> Result<ResolvedBudgets> {
        self.lora.validate()?;
        let window = if self.window_override == 0 { model.window } else { self.window_override };
        if window < 8 {
            return Err(Error::config(format!("window {window} is too small (minimum 8)")));
        }
        if self.chunk_size < 2 {
            return Err(Error::config("chunk_size must be at least 2"));
        }
        if self.chunk_size + 1 > window {
            return Err(Error::config(format!(
                "chunk_size {} leaves no input slot in window {window}",
                self.chunk_size
            )));
        }
        let input_budget =
            if self.input_length == 0 { window - self.chunk_size } else { self.input_length };
        if input_budget == 0 {
            return Err(Error::config("input_length must be positive"));
        }
        if input_budget + self.chunk_size > window {
            return Err(Error::config(format!(
                "input_length {} + chunk_size {} exceeds window {window}",
                input_budget, self.chunk_size
            )));
        }
        if self.train_context + self.chunk_size > model.window {
            return Err(Error::config(format!(
                "train_context {} + chunk_size {} exceeds the model window {} that training \
                 sequences must fit",
                self.train_context, self.chunk_size, model.window
            )));
        }
        if self.attention_sink && !self.cache_reuse {
            return Err(Error::config(
                "attention_sink requires cache_reuse: pinned sinks only help when cached KV \
                 states are kept across adapter versions",
            ));
        }
        if self.attention_sink {
            if self.n_sinks == 0 {
                return Err(Error::config("attention_sink needs n_sinks >= 1"));
            }
            if self.n_sinks >= input_budget {
                return Err(Error::config(format!(
                    "n_sinks {} must be smaller than the input budget {input_budget}",
                    self.n_sinks
                )));
            }
        }
        if !self.ntk_scale.is_finite() || self.ntk_scale < 1.0 {
            return Err(Error::config("ntk_scale must be a finite value >= 1"));
        }
        if !self.sampling.temperature.is_finite() || self.sampling.temperature < 0.0 {
            return Err(Error::config("temperature must be finite and >= 0"));
        }
        if !self.sampling.repetition_penalty.is_finite() || self.sampling.repetition_penalty < 1.0 {
            return Err(Error::config("repetition_penalty must be finite and >= 1"));
        }
        Ok(ResolvedBudgets { window, input_budget })
    }
}

/// Per-token record: which adapter version produced this token's logits, how
/// many cache entries the prediction attended to, and the running
/// negative-log-likelihood total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenEvent {
    /// Position in the full token stream.
    pub index: usize,
    /// Adapter version the logits were computed with.
    pub version: u32,
    /// Cache entries visible to this prediction.
    pub window: usize,
    /// NLL of the realized token under the unmodified model distribution.
    pub nll: f64,
    /// Running sum of `nll` over this run.
    pub cum_nll: f64,
}

/// Timing and resource figures for one run.
#[derive(Clone, Copy, Debug, Default)]
pub struct SessionStats {
    pub wall_seconds: f64,
    /// Total adapter-training compute, wherever it ran.
    pub train_seconds: f64,
    pub n_train_updates: u32,
    pub adapter_parameters: usize,
    /// High-water tensor memory on the calling thread.
    pub peak_bytes: usize,
}

/// Output of a generation run. The adapter itself is destroyed when the run
/// ends; everything needed to audit or replay the run is in here.
#[derive(Clone, Debug)]
pub struct GenOutput {
    /// Generated tokens (prompt not included).
    pub tokens: Vec<u32>,
    /// One event per generated token.
    pub events: Vec<TokenEvent>,
    /// Chunk spans trained on, in training order (prompt spans first).
    pub trained_chunks: Vec<(usize, usize)>,
    pub stats: SessionStats,
    /// Set when the parallel trainer stopped early; generation continues on
    /// the last good adapter version.
    pub trainer_error: Option<String>,
}

/// Output of a teacher-forced scoring run.
#[derive(Clone, Debug)]
pub struct StreamOutput {
    /// One event per scored token (every token except the first).
    pub events: Vec<TokenEvent>,
    pub nll_sum: f64,
    pub n_scored: usize,
    pub trained_chunks: Vec<(usize, usize)>,
    pub stats: SessionStats,
}

impl StreamOutput {
    pub fn ppl(&self) -> f64 {
        (self.nll_sum / self.n_scored.max(1) as f64).exp()
    }
}

/// A generation task embedded in a scored document: produce the tokens of
/// `doc[prefix_end..target_end]` given everything before `prefix_end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentTask {
    pub prefix_end: usize,
    pub target_end: usize,
}

#[derive(Clone, Debug)]
pub struct SegmentResult {
    pub task: SegmentTask,
    pub hypothesis: Vec<u32>,
    pub reference: Vec<u32>,
}

/// The recorded decisions needed to reproduce a run exactly: the adapter
/// version under each generated token and the chunk spans in training order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplaySchedule {
    pub versions: Vec<u32>,
    pub trained_chunks: Vec<(usize, usize)>,
}

impl ReplaySchedule {
    pub fn from_output(out: &GenOutput) -> Self {
        ReplaySchedule {
            versions: out.events.iter().map(|e| e.version).collect(),
            trained_chunks: out.trained_chunks.clone(),
        }
    }
}

/// A model plus a validated engine configuration.
pub struct Session {
    model: Arc<ModelParams>,
    cfg: EngineConfig,
    budgets: ResolvedBudgets,
}

impl Session {
    pub fn new(model: Arc<ModelParams>, cfg: EngineConfig) -> Result<Self> {
        let budgets = cfg.resolve(&model.cfg)?;
        Ok(Session { model, cfg, budgets })
    }

    pub fn model(&self) -> &Arc<ModelParams> {
        &self.model
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn budgets(&self) -> ResolvedBudgets {
        self.budgets
    }

    /// Generate `n_tokens` after `prompt`, training the adapter chunk by
    /// chunk. If the prompt itself exceeds the input budget, the adapter is
    /// first trained on the prompt's chunks. The adapter is destroyed when
    /// the run finishes.
    pub fn generate(&self, prompt: &[u32], n_tokens: usize, seed: u64) -> Result<GenOutput> {
        match self.cfg.deployment {
            Deployment::Cascaded => run_generation(self, prompt, n_tokens, seed, GenMode::Train),
            Deployment::Parallelized => parallel::generate(self, prompt, n_tokens, seed),
        }
    }

    /// Re-run a recorded generation deterministically: the adapter trains on
    /// exactly the recorded chunk spans, stepping to each recorded version
    /// right before the token that used it.
    pub fn replay(
        &self,
        prompt: &[u32],
        n_tokens: usize,
        seed: u64,
        schedule: &ReplaySchedule,
    ) -> Result<GenOutput> {
        if schedule.versions.len() != n_tokens {
            return Err(Error::config(format!(
                "replay schedule covers {} tokens but {n_tokens} were requested",
                schedule.versions.len()
            )));
        }
        run_generation(
            self,
            prompt,
            n_tokens,
            seed,
            GenMode::Replay { versions: &schedule.versions, spans: &schedule.trained_chunks, cursor: 0 },
        )
    }

    /// Teacher-forced pass over `doc`, scoring every token except the first.
    /// With `train = true` the adapter updates at every chunk boundary (and
    /// each token is scored by an adapter that never saw its own chunk);
    /// with `train = false` the run is the untouched-model baseline under
    /// the *identical* windowing schedule.
    pub fn stream_score(&self, doc: &[u32], train: bool, seed: u64) -> Result<StreamOutput> {
        stream_score(self, doc, train, seed)
    }

    /// Teacher-forced pass over `doc` that pauses at each task boundary to
    /// generate a hypothesis continuation from the current adapter + cache
    /// state. The main stream always continues with the reference tokens, so
    /// training is unaffected by hypothesis quality.
    pub fn segment_run(
        &self,
        doc: &[u32],
        tasks: &[SegmentTask],
        train: bool,
        seed: u64,
    ) -> Result<(Vec<SegmentResult>, SessionStats)> {
        segment_run(self, doc, tasks, train, seed)
    }
}

/// Write events as CSV: `index,version,window,cum_nll`.
pub fn write_event_log(path: &Path, events: &[TokenEvent]) -> Result<()> {
    use std::io::Write;
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(format!("write {}", path.display()), e);
    writeln!(w, "index,version,window,cum_nll").map_err(io)?;
    for ev in events {
        writeln!(w, "{},{},{},{:.6}", ev.index, ev.version, ev.window, ev.cum_nll).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    match tokens.iter().find(|t| **t as usize >= vocab) {
        Some(t) => Err(Error::config(format!("token id {t} is out of range for vocab {vocab}"))),
        None => Ok(()),
    }
}

/// Pick a token from a logits row. The recorded NLL always comes from the
/// raw distribution; temperature and repetition penalty shape only the
/// choice itself.
pub(crate) fn sample_from_logits(
    row: &[f32],
    recent: &[u32],
    sampling: &Sampling,
    rng: &mut ChaCha8Rng,
) -> (u32, f64) {
    let mut adj: Vec<f64> = row.iter().map(|v| *v as f64).collect();
    if sampling.repetition_penalty > 1.0 {
        let mut seen = vec![false; adj.len()];
        for t in recent {
            seen[*t as usize] = true;
        }
        let rho = sampling.repetition_penalty;
        for (v, s) in adj.iter_mut().zip(&seen) {
            if *s {
                if *v > 0.0 {
                    *v /= rho;
                } else {
                    *v *= rho;
                }
            }
        }
    }
    let tok = if sampling.temperature == 0.0 {
        let mut best = 0usize;
        for (i, v) in adj.iter().enumerate() {
            if *v > adj[best] {
                best = i;
            }
        }
        best as u32
    } else {
        let t = sampling.temperature;
        let mx = adj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = adj.iter().map(|v| ((v - mx) / t).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * z;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        pick as u32
    };
    (tok, kernels::nll_from_logits_row(row, tok))
}

/// Which adapter the stream runs with.
enum AdapterSlot {
    /// No adapter at all: the plain base model.
    None,
    /// A locally owned lineage that can train in place.
    Owned(LoraAdapter),
    /// A read-only snapshot adopted from a trainer thread.
    Adopted(Arc<LoraAdapter>),
}

impl AdapterSlot {
    fn get(&self) -> Option<&LoraAdapter> {
        match self {
            AdapterSlot::None => None,
            AdapterSlot::Owned(a) => Some(a),
            AdapterSlot::Adopted(a) => Some(a),
        }
    }

    fn version(&self) -> u32 {
        self.get().map(|a| a.version()).unwrap_or(0)
    }
}

/// The streaming core shared by generation, scoring, segment tasks, replay,
/// and the parallel deployment: it owns the cache, the token stream, the
/// chunk grid, and the rebuild/eviction rules.
struct RunCore<'s> {
    model: &'s ModelParams,
    cfg: &'s EngineConfig,
    budgets: ResolvedBudgets,
    cache: KvCache,
    slot: AdapterSlot,
    /// Full token stream: prompt/document prefix plus produced tokens.
    all: Vec<u32>,
    /// Number of stream tokens fed into the cache so far.
    fed: usize,
    /// Chunk-grid origin: boundaries fall at `grid + k·chunk_size`.
    grid: usize,
    /// Train the owned adapter when the grid boundary rule fires.
    train_enabled: bool,
    /// A rebuild is due before the next feed (set at boundaries when
    /// `cache_reuse` is off, and at adapter swaps in replay/parallel mode).
    rebuild_due: bool,
    /// Feed index at which the trailing partial prompt chunk trains:
    /// `(index, span_start)`.
    tail_train: Option<(usize, usize)>,
    trained: Vec<(usize, usize)>,
    train_seconds: f64,
    n_updates: u32,
    /// Adapter version / cache length in effect for the most recent logits.
    last_version: u32,
    last_window: usize,
}

impl<'s> RunCore<'s> {
    fn new(session: &'s Session, slot: AdapterSlot) -> Self {
        let m = &session.model.cfg;
        let b = session.budgets;
        let cache = if session.cfg.attention_sink {
            KvCache::new_sink(m.n_layers, m.d_model, b.window, session.cfg.n_sinks)
        } else {
            KvCache::new(m.n_layers, m.d_model, b.window)
        };
        RunCore {
            model: &session.model,
            cfg: &session.cfg,
            budgets: b,
            cache,
            slot,
            all: Vec::new(),
            fed: 0,
            grid: 0,
            train_enabled: false,
            rebuild_due: false,
            tail_train: None,
            trained: Vec::new(),
            train_seconds: 0.0,
            n_updates: 0,
            last_version: 0,
            last_window: 0,
        }
    }

    fn forward(&self) -> Forward<'_> {
        Forward { params: self.model, adapter: self.slot.get(), ntk_scale: self.cfg.ntk_scale }
    }

    fn version(&self) -> u32 {
        self.slot.version()
    }

    /// The chunk span completed at feed index `i`, if the grid boundary rule
    /// fires there: feeding token `i` is the deferred feed of a chunk's last
    /// token, so the chunk `[i+1−Δ, i+1)` is complete and trains now.
    fn boundary_span(&self, i: usize) -> Option<(usize, usize)> {
        let delta = self.cfg.chunk_size;
        if i + 1 < self.grid + delta {
            return None;
        }
        let rel = i + 1 - self.grid;
        if rel.is_multiple_of(delta) {
            Some((i + 1 - delta, i + 1))
        } else {
            None
        }
    }

    /// First index in `[from, upto)` where a feed rule fires.
    fn next_rule_index(&self, from: usize, upto: usize) -> Option<usize> {
        let delta = self.cfg.chunk_size;
        let first = self.grid + delta - 1;
        let boundary = if from <= first {
            first
        } else {
            let off = (from - first) % delta;
            if off == 0 {
                from
            } else {
                from + (delta - off)
            }
        };
        let mut cand = if boundary < upto { Some(boundary) } else { None };
        if let Some((ti, _)) = self.tail_train {
            if ti >= from && ti < upto && cand.is_none_or(|c| ti < c) {
                cand = Some(ti);
            }
        }
        cand
    }

    /// Train the owned adapter on `span`, with up to `train_context`
    /// preceding tokens as loss-free context.
    fn train_span(&mut self, span: (usize, usize)) -> Result<()> {
        let (s, e) = span;
        debug_assert!(e <= self.all.len());
        let ctx_from = s - self.cfg.train_context.min(s);
        let context = self.all[ctx_from..s].to_vec();
        let chunk = self.all[s..e].to_vec();
        let adapter = match &mut self.slot {
            AdapterSlot::Owned(a) => a,
            _ => return Err(Error::runtime("this run does not own a trainable adapter")),
        };
        let t0 = Instant::now();
        adapter.train_chunk(self.model, &context, &chunk)?;
        self.train_seconds += t0.elapsed().as_secs_f64();
        self.n_updates += 1;
        self.trained.push(span);
        Ok(())
    }

    /// Apply a due rebuild: drop everything but the most recent
    /// `input_budget` fed tokens and recompute their KV states with the
    /// current adapter (positions restart at zero). Skipped when nothing
    /// would be dropped — the recomputation would be an exact no-op.
    fn apply_rebuild(&mut self) {
        self.rebuild_due = false;
        let keep = self.budgets.input_budget.min(self.fed);
        if keep >= self.cache.len() {
            return;
        }
        let tokens = self.all[self.fed - keep..self.fed].to_vec();
        let fwd = Forward { params: self.model, adapter: self.slot.get(), ntk_scale: self.cfg.ntk_scale };
        fwd.slide_and_recompute(&mut self.cache, &tokens);
    }

    /// Make room for `n` more entries: sink caches evict in place, rotated
    /// caches rebuild from the recent window.
    fn ensure_capacity(&mut self, n: usize) {
        if self.cache.len() + n <= self.budgets.window {
            return;
        }
        if self.cfg.attention_sink {
            self.cache.sink_evict(self.budgets.input_budget);
        } else {
            let keep = self.budgets.input_budget.min(self.fed);
            let tokens = self.all[self.fed - keep..self.fed].to_vec();
            let fwd = Forward { params: self.model, adapter: self.slot.get(), ntk_scale: self.cfg.ntk_scale };
            fwd.slide_and_recompute(&mut self.cache, &tokens);
        }
        debug_assert!(self.cache.len() + n <= self.budgets.window);
    }

    /// Feed the next stream token, applying the full rule set: boundary
    /// training, due rebuilds, capacity maintenance. Returns the logits row
    /// predicting the following token.
    fn feed_one(&mut self) -> Result<Vec<f32>> {
        let i = self.fed;
        debug_assert!(i < self.all.len());
        if let Some(span) = self.boundary_span(i) {
            if self.train_enabled && matches!(self.slot, AdapterSlot::Owned(_)) {
                self.train_span(span)?;
            }
            if !self.cfg.cache_reuse {
                self.rebuild_due = true;
            }
        } else if let Some((ti, start)) = self.tail_train {
            if ti == i {
                self.tail_train = None;
                if self.train_enabled && matches!(self.slot, AdapterSlot::Owned(_)) {
                    self.train_span((start, i + 1))?;
                    if !self.cfg.cache_reuse {
                        self.rebuild_due = true;
                    }
                }
            }
        }
        if self.rebuild_due {
            self.apply_rebuild();
        }
        self.ensure_capacity(1);
        let fwd = Forward { params: self.model, adapter: self.slot.get(), ntk_scale: self.cfg.ntk_scale };
        let row = fwd.decode_one(&mut self.cache, self.all[i]);
        self.fed = i + 1;
        self.last_version = self.version();
        self.last_window = self.cache.len();
        Ok(row)
    }

    /// Feed stream tokens `[fed, to)` as one batched pass. The caller must
    /// ensure no feed rule fires strictly inside the range. Returns the
    /// logits block and the cache length before the feed.
    fn feed_block(&mut self, to: usize) -> Result<Option<(Tensor<f32>, usize)>> {
        let from = self.fed;
        debug_assert!(to <= self.all.len());
        if from >= to {
            return Ok(None);
        }
        debug_assert!(self.next_rule_index(from, to).is_none_or(|i| i == from));
        if self.rebuild_due {
            self.apply_rebuild();
        }
        self.ensure_capacity(to - from);
        let len_before = self.cache.len();
        let tokens = self.all[from..to].to_vec();
        let fwd = Forward { params: self.model, adapter: self.slot.get(), ntk_scale: self.cfg.ntk_scale };
        let logits = fwd.prefill(&mut self.cache, &tokens);
        self.fed = to;
        self.last_version = self.version();
        self.last_window = self.cache.len();
        Ok(Some((logits, len_before)))
    }

    /// Feed stream tokens up to `upto`, splitting at rule indices so the
    /// rules apply exactly where they should. Returns the last logits row.
    fn feed_until(&mut self, upto: usize) -> Result<Vec<f32>> {
        let mut last: Option<Vec<f32>> = None;
        while self.fed < upto {
            let stop = self.next_rule_index(self.fed, upto).unwrap_or(upto);
            if self.fed < stop {
                if let Some((logits, _)) = self.feed_block(stop)? {
                    let v = self.model.cfg.vocab;
                    let data = logits.as_slice();
                    last = Some(data[data.len() - v..].to_vec());
                }
            }
            if stop < upto {
                last = Some(self.feed_one()?);
            }
        }
        last.ok_or_else(|| Error::runtime("feed_until fed nothing"))
    }

    /// Sampling context: the stream tokens inside the attention window.
    fn recent_window(&self) -> &[u32] {
        let n = self.all.len();
        &self.all[n - n.min(self.budgets.window)..]
    }

    fn stats(&self, wall: f64) -> SessionStats {
        SessionStats {
            wall_seconds: wall,
            train_seconds: self.train_seconds,
            n_train_updates: self.n_updates,
            adapter_parameters: self.slot.get().map(|a| a.n_parameters()).unwrap_or(0),
            peak_bytes: mem::peak_bytes(),
        }
    }
}

/// Feed a whole prompt, training on its chunks when it exceeds the input
/// budget (the trailing partial chunk trains only when it is at least a
/// quarter of a chunk). Returns the logits row predicting the first token
/// after the prompt, and leaves the chunk grid anchored at the prompt end.
fn prompt_phase(core: &mut RunCore<'_>, prompt: &[u32]) -> Result<Vec<f32>> {
    debug_assert!(core.all.is_empty());
    core.all.extend_from_slice(prompt);
    core.train_enabled = prompt.len() > core.budgets.input_budget
        && matches!(core.slot, AdapterSlot::Owned(_));
    if core.train_enabled {
        let tail = prompt.len() % core.cfg.chunk_size;
        if tail > 0 && tail * 4 >= core.cfg.chunk_size {
            core.tail_train = Some((prompt.len() - 1, prompt.len() - tail));
        }
    }
    let row = core.feed_until(prompt.len())?;
    core.tail_train = None;
    core.grid = prompt.len();
    Ok(row)
}

enum GenMode<'a> {
    /// Cascaded: train the owned adapter at every chunk boundary.
    Train,
    /// Deterministic re-run: train exactly the recorded spans, stepping to
    /// each recorded version right before the token that used it.
    Replay { versions: &'a [u32], spans: &'a [(usize, usize)], cursor: usize },
}

fn run_generation(
    session: &Session,
    prompt: &[u32],
    n_tokens: usize,
    seed: u64,
    mut mode: GenMode<'_>,
) -> Result<GenOutput> {
    let vocab = session.model.cfg.vocab;
    check_tokens(prompt, vocab)?;
    if prompt.is_empty() {
        return Err(Error::config("generation needs a non-empty prompt"));
    }
    if n_tokens == 0 {
        return Err(Error::config("n_tokens must be positive"));
    }
    mem::reset_peak();
    let t0 = Instant::now();

    let adapter = LoraAdapter::attach(&session.model, session.cfg.lora.clone(), seed)?;
    let mut core = RunCore::new(session, AdapterSlot::Owned(adapter));
    let mut row = prompt_phase(&mut core, prompt)?;

    if let GenMode::Replay { spans, cursor, .. } = &mut mode {
        // The prompt phase re-trains deterministically; its spans must be
        // the prefix of the recorded schedule.
        if core.trained.as_slice() != &spans[..core.trained.len().min(spans.len())] {
            return Err(Error::config(
                "replay schedule does not start with the spans this prompt trains on",
            ));
        }
        *cursor = core.trained.len();
    }
    core.train_enabled = matches!(mode, GenMode::Train);

    let mut tokens = Vec::with_capacity(n_tokens);
    let mut events = Vec::with_capacity(n_tokens);
    let mut cum = 0.0f64;
    for k in 0..n_tokens {
        if k > 0 {
            if let GenMode::Replay { versions, spans, cursor } = &mut mode {
                let want = versions[k];
                if want < core.version() {
                    return Err(Error::config("replay schedule steps versions backward"));
                }
                let stepped = want > core.version();
                while core.version() < want {
                    let span = *spans.get(*cursor).ok_or_else(|| {
                        Error::config("replay schedule ran out of trained chunk spans")
                    })?;
                    core.train_span(span)?;
                    *cursor += 1;
                }
                if stepped && !session.cfg.cache_reuse {
                    core.rebuild_due = true;
                }
            }
            row = core.feed_one()?;
        } else if let GenMode::Replay { versions, .. } = &mode {
            if versions[0] != core.version() {
                return Err(Error::config(format!(
                    "replay schedule starts at version {} but the prompt phase reaches {}",
                    versions[0],
                    core.version()
                )));
            }
        }
        let idx = core.all.len();
        let mut srng = rng::derive_indexed(seed, "engine.sample", idx as u64);
        let (tok, nll) =
            sample_from_logits(&row, core.recent_window(), &session.cfg.sampling, &mut srng);
        cum += nll;
        events.push(TokenEvent {
            index: idx,
            version: core.last_version,
            window: core.last_window,
            nll,
            cum_nll: cum,
        });
        tokens.push(tok);
        core.all.push(tok);
    }

    let stats = core.stats(t0.elapsed().as_secs_f64());
    Ok(GenOutput { tokens, events, trained_chunks: core.trained, stats, trainer_error: None })
}

fn stream_score(session: &Session, doc: &[u32], train: bool, seed: u64) -> Result<StreamOutput> {
    let vocab = session.model.cfg.vocab;
    check_tokens(doc, vocab)?;
    if doc.len() < 2 {
        return Err(Error::config("scoring needs at least two tokens"));
    }
    mem::reset_peak();
    let t0 = Instant::now();

    let slot = if train {
        AdapterSlot::Owned(LoraAdapter::attach(&session.model, session.cfg.lora.clone(), seed)?)
    } else {
        AdapterSlot::None
    };
    let mut core = RunCore::new(session, slot);
    core.all.extend_from_slice(doc);
    core.train_enabled = train;

    let delta = session.cfg.chunk_size;
    let mut events = Vec::with_capacity(doc.len() - 1);
    let mut cum = 0.0f64;
    let mut push_event = |index: usize, version: u32, window: usize, row: &[f32]| {
        let nll = kernels::nll_from_logits_row(row, doc[index]);
        cum += nll;
        events.push(TokenEvent { index, version, window, nll, cum_nll: cum });
    };

    let n = doc.len();
    let mut s = 0usize;
    while s < n {
        let e = (s + delta).min(n);
        if s > 0 {
            // First input of this chunk (token s−1) carries the boundary:
            // the previous chunk trains before this feed, so token s is
            // already scored by the adapter that saw chunks 0..s/Δ only.
            let row = core.feed_one()?;
            push_event(s, core.last_version, core.last_window, &row);
        }
        let to = e - 1; // inputs for predictions s+1..e−1 (or 1..e−1 when s = 0)
        if let Some((logits, len_before)) = core.feed_block(to)? {
            let from = to - logits.rows();
            let data = logits.as_slice();
            for j in 0..logits.rows() {
                let row = &data[j * vocab..(j + 1) * vocab];
                push_event(from + j + 1, core.last_version, len_before + j + 1, row);
            }
        }
        s = e;
    }

    let n_scored = events.len();
    debug_assert_eq!(n_scored, doc.len() - 1);
    let nll_sum = cum;
    let stats = core.stats(t0.elapsed().as_secs_f64());
    Ok(StreamOutput { events, nll_sum, n_scored, trained_chunks: core.trained, stats })
}

fn segment_run(
    session: &Session,
    doc: &[u32],
    tasks: &[SegmentTask],
    train: bool,
    seed: u64,
) -> Result<(Vec<SegmentResult>, SessionStats)> {
    let vocab = session.model.cfg.vocab;
    check_tokens(doc, vocab)?;
    if tasks.is_empty() {
        return Err(Error::config("segment run needs at least one task"));
    }
    let mut prev_end = 0usize;
    for t in tasks {
        if t.prefix_end < 1 || t.prefix_end < prev_end || t.target_end <= t.prefix_end {
            return Err(Error::config(format!(
                "segment task ({}, {}) is out of order or degenerate",
                t.prefix_end, t.target_end
            )));
        }
        if t.target_end > doc.len() {
            return Err(Error::config(format!(
                "segment task ends at {} beyond the document length {}",
                t.target_end,
                doc.len()
            )));
        }
        prev_end = t.target_end;
    }
    mem::reset_peak();
    let t0 = Instant::now();

    let slot = if train {
        AdapterSlot::Owned(LoraAdapter::attach(&session.model, session.cfg.lora.clone(), seed)?)
    } else {
        AdapterSlot::None
    };
    let mut core = RunCore::new(session, slot);
    core.all.extend_from_slice(doc);
    core.train_enabled = train;

    let eff = session.budgets.window;
    let mut results = Vec::with_capacity(tasks.len());
    for task in tasks {
        let row = core.feed_until(task.prefix_end)?;
        // Fork: hypothesis decoding must not disturb the main stream.
        let mut fork_cache = core.cache.clone();
        let fwd = core.forward();
        let n_hyp = task.target_end - task.prefix_end;
        let mut hyp: Vec<u32> = Vec::with_capacity(n_hyp);
        let mut frow = row;
        for j in 0..n_hyp {
            let abs = task.prefix_end + j;
            // Recent window over the forked stream: document prefix + hypothesis.
            let mut recent: Vec<u32> = Vec::with_capacity(eff);
            let need = eff.saturating_sub(hyp.len());
            let pre = &doc[task.prefix_end - need.min(task.prefix_end)..task.prefix_end];
            recent.extend_from_slice(&pre[pre.len().saturating_sub(eff)..]);
            recent.extend_from_slice(&hyp[hyp.len().saturating_sub(eff)..]);
            let mut srng = rng::derive_indexed(seed, "engine.segment", abs as u64);
            let (tok, _) = sample_from_logits(&frow, &recent, &session.cfg.sampling, &mut srng);
            hyp.push(tok);
            if j + 1 < n_hyp {
                if fork_cache.len() + 1 > eff {
                    if session.cfg.attention_sink {
                        fork_cache.sink_evict(session.budgets.input_budget);
                    } else {
                        let keep = session.budgets.input_budget;
                        let mut hist: Vec<u32> = doc[..task.prefix_end].to_vec();
                        hist.extend_from_slice(&hyp);
                        let tokens = hist[hist.len() - keep.min(hist.len())..].to_vec();
                        fwd.slide_and_recompute(&mut fork_cache, &tokens);
                    }
                }
                frow = fwd.decode_one(&mut fork_cache, tok);
            }
        }
        results.push(SegmentResult {
            task: *task,
            hypothesis: hyp,
            reference: doc[task.prefix_end..task.target_end].to_vec(),
        });
    }

    let stats = core.stats(t0.elapsed().as_secs_f64());
    Ok((results, stats))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn tiny_model() -> Arc<ModelParams> {
        let cfg = ModelConfig {
            vocab: 48,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            window: 32,
            ..ModelConfig::default()
        };
        Arc::new(ModelParams::init(&cfg, 11).unwrap())
    }

    pub fn tiny_cfg() -> EngineConfig {
        EngineConfig {
            chunk_size: 4,
            train_context: 4,
            window_override: 16,
            lora: LoraConfig {
                rank: 4,
                dropout: 0.0,
                epochs: 1,
                warmup_chunks: 0,
                ..LoraConfig::default()
            },
            ..EngineConfig::default()
        }
    }
}
