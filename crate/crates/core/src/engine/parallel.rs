//! Parallelized deployment: adapter training runs on a second thread while
//! generation continues on snapshots.
//!
//! The trainer owns the adapter lineage and trains completed chunks strictly
//! in order, publishing an immutable snapshot after each update. The
//! generator hands over a chunk the moment it completes and adopts published
//! snapshots between tokens according to a pacing policy. Because the
//! lineage trains the same spans in the same order as a cascaded run would,
//! each published version is bit-identical to its cascaded counterpart — the
//! only thing pacing changes is *which* version is under each token, and
//! that trace is recorded per token, so any run can be replayed exactly.

use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::mem;
use crate::rng;

use super::{
    check_tokens, prompt_phase, sample_from_logits, AdapterSlot, GenOutput, RunCore, Session,
    TokenEvent,
};

/// When the generator adopts freshly trained adapter versions.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum TrainerPacing {
    /// Adopt whatever the trainer has finished; never wait. Version timing
    /// depends on real thread speeds (the recorded trace makes it
    /// replayable).
    Realtime,
    /// Wait at each chunk boundary until that chunk's update is ready —
    /// token-for-token equivalent to the cascaded deployment.
    SyncAtBoundary,
    /// Model a trainer that lags: a chunk's update is adopted only once this
    /// many further tokens have been generated. 0 behaves like
    /// `SyncAtBoundary`.
    DelayTokens(usize),
    /// Model a trainer that never finishes: the whole generation runs on the
    /// adapter as it stood after the prompt phase.
    Stalled,
    /// Fault injection for tests and drills: the trainer stops with an error
    /// before training the given (zero-based) generation chunk; generation
    /// continues on the last good version.
    FailOnChunk(u32),
}

struct TrainJob {
    span: (usize, usize),
    context: Vec<u32>,
    chunk: Vec<u32>,
}

#[derive(Default)]
struct Completed {
    /// Snapshots in training order; `snaps[j]` is prompt version + j + 1.
    snaps: Vec<Arc<LoraAdapter>>,
    spans: Vec<(usize, usize)>,
    train_seconds: f64,
    n_updates: u32,
    error: Option<String>,
    done: bool,
}

struct Shared {
    state: Mutex<Completed>,
    cv: Condvar,
}

fn trainer_loop(
    mut lineage: LoraAdapter,
    model: Arc<crate::model::ModelParams>,
    pacing: TrainerPacing,
    rx: mpsc::Receiver<TrainJob>,
    shared: Arc<Shared>,
) {
    for (chunk_idx, job) in rx.into_iter().enumerate() {
        let chunk_idx = chunk_idx as u32;
        if let TrainerPacing::FailOnChunk(f) = pacing {
            if chunk_idx == f {
                let mut st = shared.state.lock().unwrap();
                st.error = Some(format!("trainer fault injected before chunk {f}"));
                st.done = true;
                shared.cv.notify_all();
                return;
            }
        }
        let t0 = Instant::now();
        let res = lineage.train_chunk(&model, &job.context, &job.chunk);
        let dt = t0.elapsed().as_secs_f64();
        let mut st = shared.state.lock().unwrap();
        match res {
            Ok(_) => {
                st.train_seconds += dt;
                st.n_updates += 1;
                st.snaps.push(Arc::new(lineage.clone()));
                st.spans.push(job.span);
            }
            Err(e) => {
                st.error = Some(e.to_string());
                st.done = true;
                shared.cv.notify_all();
                return;
            }
        }
        shared.cv.notify_all();
    }
    let mut st = shared.state.lock().unwrap();
    st.done = true;
    shared.cv.notify_all();
}

pub(super) fn generate(
    session: &Session,
    prompt: &[u32],
    n_tokens: usize,
    seed: u64,
) -> Result<GenOutput> {
    check_tokens(prompt, session.model.cfg.vocab)?;
    if prompt.is_empty() {
        return Err(Error::config("generation needs a non-empty prompt"));
    }
    if n_tokens == 0 {
        return Err(Error::config("n_tokens must be positive"));
    }
    mem::reset_peak();
    let t0 = Instant::now();
    let pacing = session.cfg.pacing;
    let delta = session.cfg.chunk_size;

    // The prompt phase (including any prompt training) runs synchronously:
    // generation cannot start before the first logits row exists anyway.
    let adapter = LoraAdapter::attach(&session.model, session.cfg.lora.clone(), seed)?;
    let mut core = RunCore::new(session, AdapterSlot::Owned(adapter));
    let mut row = prompt_phase(&mut core, prompt)?;
    core.train_enabled = false;

    // Hand the lineage to the trainer; generation continues on snapshots.
    let lineage = match std::mem::replace(&mut core.slot, AdapterSlot::None) {
        AdapterSlot::Owned(a) => a,
        _ => unreachable!("the prompt phase always runs on an owned adapter"),
    };
    let prompt_version = lineage.version();
    core.slot = AdapterSlot::Adopted(Arc::new(lineage.clone()));

    let shared = Arc::new(Shared { state: Mutex::new(Completed::default()), cv: Condvar::new() });
    let (handle, tx) = if matches!(pacing, TrainerPacing::Stalled) {
        (None, None)
    } else {
        let (tx, rx) = mpsc::channel::<TrainJob>();
        let shared2 = shared.clone();
        let model = session.model.clone();
        let h = thread::spawn(move || trainer_loop(lineage, model, pacing, rx, shared2));
        (Some(h), Some(tx))
    };

    let mut tokens = Vec::with_capacity(n_tokens);
    let mut events = Vec::with_capacity(n_tokens);
    let mut cum = 0.0f64;
    let mut gen = || -> Result<()> {
        for k in 0..n_tokens {
            if k > 0 {
                // A chunk completed with the previous token: hand it over.
                if let Some(span) = core.boundary_span(core.fed) {
                    if let Some(tx) = tx.as_ref() {
                        let ctx_from = span.0 - session.cfg.train_context.min(span.0);
                        let _ = tx.send(TrainJob {
                            span,
                            context: core.all[ctx_from..span.0].to_vec(),
                            chunk: core.all[span.0..span.1].to_vec(),
                        });
                    }
                }
                // Adopt per pacing.
                if handle.is_some() {
                    let target_rel = match pacing {
                        TrainerPacing::Realtime => None,
                        TrainerPacing::SyncAtBoundary | TrainerPacing::FailOnChunk(_) => {
                            Some(k / delta)
                        }
                        TrainerPacing::DelayTokens(d) => Some(k.saturating_sub(d) / delta),
                        TrainerPacing::Stalled => unreachable!("no trainer is spawned"),
                    };
                    let mut st = shared.state.lock().unwrap();
                    if let Some(rel) = target_rel {
                        while st.snaps.len() < rel && st.error.is_none() && !st.done {
                            st = shared.cv.wait(st).unwrap();
                        }
                    }
                    let want_rel = match target_rel {
                        None => st.snaps.len(),
                        Some(rel) => rel.min(st.snaps.len()),
                    };
                    let cur_rel = (core.slot.version() - prompt_version) as usize;
                    if want_rel > cur_rel {
                        core.slot = AdapterSlot::Adopted(st.snaps[want_rel - 1].clone());
                        if !session.cfg.cache_reuse {
                            core.rebuild_due = true;
                        }
                    }
                }
                row = core.feed_one()?;
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
        Ok(())
    };
    let gen_result = gen();

    // Close the queue, let the trainer drain what it already holds, and fold
    // its side of the books into the run totals.
    drop(tx);
    let mut trainer_error = None;
    if let Some(h) = handle {
        h.join().map_err(|_| Error::runtime("the adapter trainer thread panicked"))?;
        let st = shared.state.lock().unwrap();
        core.trained.extend(st.spans.iter().copied());
        core.train_seconds += st.train_seconds;
        core.n_updates += st.n_updates;
        trainer_error = st.error.clone();
    }
    gen_result?;

    let stats = core.stats(t0.elapsed().as_secs_f64());
    Ok(GenOutput { tokens, events, trained_chunks: core.trained, stats, trainer_error })
}
