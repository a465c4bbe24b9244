//! Evaluation metrics: strided sliding-window perplexity, position-bucketed
//! perplexity reports, BLEU, and relative-change reporting.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::TokenEvent;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::cache::KvCache;
use crate::model::infer::Forward;
use crate::model::ModelParams;
use crate::tensor::kernels;

/// Window placement for strided perplexity evaluation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PplOptions {
    /// Attention reach per placement. May exceed the model's trained window
    /// (that is exactly what position-extension evaluation measures).
    pub window: usize,
    /// Tokens scored per placement; each placement scores the final `stride`
    /// positions of its window. `stride == window` is disjoint-chunk
    /// evaluation; smaller strides give each token more context.
    pub stride: usize,
    /// Rotary position extension factor (1 = off).
    pub ntk_scale: f64,
}

/// Per-token scores from a sliding-window evaluation.
#[derive(Clone, Debug)]
pub struct PplResult {
    pub events: Vec<TokenEvent>,
    pub nll_sum: f64,
    pub n_scored: usize,
}

impl PplResult {
    pub fn ppl(&self) -> f64 {
        (self.nll_sum / self.n_scored.max(1) as f64).exp()
    }
}

/// Strided sliding-window perplexity: token `t` is scored by the placement
/// in which it falls within the final `stride` positions, i.e. with
/// `min(t, window) − run_offset` real context tokens. Every token except the
/// first is scored exactly once. Each placement recomputes its window from
/// scratch, so results depend only on (window, stride), never on cache
/// history.
pub fn sliding_window_ppl(
    model: &ModelParams,
    adapter: Option<&LoraAdapter>,
    tokens: &[u32],
    opts: &PplOptions,
) -> Result<PplResult> {
    if tokens.len() < 2 {
        return Err(Error::config("perplexity needs at least two tokens"));
    }
    if opts.stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    if opts.stride > opts.window {
        return Err(Error::config(format!(
            "stride {} exceeds the evaluation window {}",
            opts.stride, opts.window
        )));
    }
    if !opts.ntk_scale.is_finite() || opts.ntk_scale < 1.0 {
        return Err(Error::config("ntk_scale must be a finite value >= 1"));
    }
    if let Some(t) = tokens.iter().find(|t| **t as usize >= model.cfg.vocab) {
        return Err(Error::config(format!(
            "token id {t} is out of range for vocab {}",
            model.cfg.vocab
        )));
    }

    let fwd = Forward { params: model, adapter, ntk_scale: opts.ntk_scale };
    let n = tokens.len();
    let vocab = model.cfg.vocab;
    let mut events = Vec::with_capacity(n - 1);
    let mut cum = 0.0f64;
    let mut next = 1usize;
    while next < n {
        let run_end = (next + opts.stride).min(n);
        // Inputs [lo, run_end−1) predict positions lo+1..run_end; we score
        // only the unseen tail next..run_end.
        let lo = (run_end - 1).saturating_sub(opts.window);
        let mut cache = KvCache::new(model.cfg.n_layers, model.cfg.d_model, opts.window);
        let logits = fwd.prefill(&mut cache, &tokens[lo..run_end - 1]);
        let data = logits.as_slice();
        for t in next..run_end {
            let row = &data[(t - 1 - lo) * vocab..(t - lo) * vocab];
            let nll = kernels::nll_from_logits_row(row, tokens[t]);
            cum += nll;
            events.push(TokenEvent { index: t, version: 0, window: t - lo, nll, cum_nll: cum });
        }
        next = run_end;
    }
    let n_scored = events.len();
    debug_assert_eq!(n_scored, n - 1);
    Ok(PplResult { events, nll_sum: cum, n_scored })
}

/// Perplexity over one bucket of token positions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentPpl {
    pub start: usize,
    pub end: usize,
    pub n_tokens: usize,
    pub nll_sum: f64,
    pub ppl: f64,
}

/// Position-bucketed perplexity report with optional BLEU and provenance
/// metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub segments: Vec<SegmentPpl>,
    pub n_tokens: usize,
    pub nll_sum: f64,
    pub overall_ppl: f64,
    pub bleu: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    /// CSV rows in the documented column order; one line per non-empty
    /// segment.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("segment_start,segment_end,n_tokens,ppl\n");
        for seg in &self.segments {
            s.push_str(&format!("{},{},{},{:.6}\n", seg.start, seg.end, seg.n_tokens, seg.ppl));
        }
        s
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "overall: ppl {:.4} over {} tokens (config {}, seed {})\n",
            self.overall_ppl, self.n_tokens, self.config_hash, self.seed
        ));
        if let Some(b) = self.bleu {
            s.push_str(&format!("bleu: {b:.4}\n"));
        }
        for seg in &self.segments {
            s.push_str(&format!(
                "  positions {:>8} .. {:>8}: ppl {:.4} over {} tokens\n",
                seg.start, seg.end, seg.ppl, seg.n_tokens
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::runtime(format!("serializing report: {e}")))
    }
}

/// Bucket per-token scores by absolute position. `boundaries` are the
/// strictly increasing split points: with boundaries `[a, b]` the buckets
/// are `[0, a)`, `[a, b)`, and `[b, end)`. Empty buckets are omitted.
pub fn segment_report(
    events: &[TokenEvent],
    boundaries: &[usize],
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    if events.is_empty() {
        return Err(Error::config("a report needs at least one scored token"));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("segment boundaries must be strictly increasing"));
    }
    let stream_end = events.iter().map(|e| e.index).max().unwrap_or(0) + 1;
    let mut starts = vec![0usize];
    starts.extend_from_slice(boundaries);
    let mut ends: Vec<usize> = boundaries.to_vec();
    ends.push(stream_end.max(boundaries.last().copied().unwrap_or(0) + 1));

    let nseg = starts.len();
    let mut counts = vec![0usize; nseg];
    let mut sums = vec![0.0f64; nseg];
    let mut total = 0.0f64;
    for ev in events {
        let b = match boundaries.iter().position(|&x| ev.index < x) {
            Some(p) => p,
            None => nseg - 1,
        };
        counts[b] += 1;
        sums[b] += ev.nll;
        total += ev.nll;
    }
    let segments: Vec<SegmentPpl> = (0..nseg)
        .filter(|&i| counts[i] > 0)
        .map(|i| SegmentPpl {
            start: starts[i],
            end: ends[i],
            n_tokens: counts[i],
            nll_sum: sums[i],
            ppl: (sums[i] / counts[i] as f64).exp(),
        })
        .collect();
    Ok(EvalReport {
        segments,
        n_tokens: events.len(),
        nll_sum: total,
        overall_ppl: (total / events.len() as f64).exp(),
        bleu: None,
        config_hash: config_hash.to_string(),
        seed,
    })
}

/// Single-reference BLEU over token ids: geometric mean of modified n-gram
/// precisions up to `max_n`, times the brevity penalty. No smoothing — a
/// zero precision at any order gives 0.
pub fn bleu(candidate: &[u32], reference: &[u32], max_n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::config("BLEU needs a non-empty reference"));
    }
    if max_n == 0 {
        return Err(Error::config("BLEU needs max_n >= 1"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for n in 1..=max_n {
        if candidate.len() < n {
            return Ok(0.0);
        }
        let mut ref_counts: HashMap<&[u32], usize> = HashMap::new();
        if reference.len() >= n {
            for g in reference.windows(n) {
                *ref_counts.entry(g).or_insert(0) += 1;
            }
        }
        let mut cand_counts: HashMap<&[u32], usize> = HashMap::new();
        for g in candidate.windows(n) {
            *cand_counts.entry(g).or_insert(0) += 1;
        }
        let total = candidate.len() + 1 - n;
        let mut matched = 0usize;
        for (g, c) in &cand_counts {
            matched += (*c).min(ref_counts.get(g).copied().unwrap_or(0));
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if candidate.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    };
    Ok((log_sum / max_n as f64).exp() * bp)
}

/// Signed percent change from `base` to `new`: `(new − base) / base × 100`.
/// The raw value round-trips exactly; use [`format_relative_change`] for the
/// one-decimal report form.
pub fn relative_change(base: f64, new: f64) -> Result<f64> {
    if base == 0.0 || !base.is_finite() || !new.is_finite() {
        return Err(Error::config("relative change needs finite values and a nonzero base"));
    }
    Ok((new - base) / base * 100.0)
}

/// Report form of a percent change: explicit sign, one decimal, truncated
/// toward zero (−23.85 prints as −23.8, not −23.9).
pub fn format_relative_change(pct: f64) -> String {
    let sign = if pct < 0.0 { "-" } else { "+" };
    let tenths = (pct.abs() * 10.0 + 1e-9).floor() as i64;
    format!("{sign}{}.{}%", tenths / 10, tenths % 10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use crate::tensor::Tensor;

    fn tiny_model() -> ModelParams {
        let cfg = ModelConfig {
            vocab: 48,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            window: 32,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 13).unwrap()
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity_exactly() {
        let mut m = tiny_model();
        m.head = Tensor::zeros(&[m.cfg.d_model, m.cfg.vocab]);
        let tokens: Vec<u32> = (0..20).map(|i| (i * 5 % 48) as u32).collect();
        let r = sliding_window_ppl(&m, None, &tokens, &PplOptions {
            window: 8,
            stride: 4,
            ntk_scale: 1.0,
        })
        .unwrap();
        let v = m.cfg.vocab as f64;
        // Exact up to single-precision log-sum-exp rounding.
        assert!((r.ppl() - v).abs() / v < 1e-6, "ppl {} vs vocab {v}", r.ppl());
    }

    #[test]
    fn every_token_is_scored_once_and_matches_a_fresh_placement_forward() {
        let m = tiny_model();
        let tokens: Vec<u32> = (0..33).map(|i| (i * 7 % 48) as u32).collect();
        for (window, stride) in [(8, 4), (8, 8), (6, 1), (12, 5), (40, 40)] {
            let r = sliding_window_ppl(&m, None, &tokens, &PplOptions {
                window,
                stride,
                ntk_scale: 1.0,
            })
            .unwrap();
            // Coverage: indices 1..n−1 exactly once, in order.
            let idx: Vec<usize> = r.events.iter().map(|e| e.index).collect();
            let want: Vec<usize> = (1..tokens.len()).collect();
            assert_eq!(idx, want, "window {window} stride {stride}");

            // Oracle: rebuild each token's placement from the definition and
            // run an independent fresh forward over exactly that span.
            let fwd = Forward::new(&m);
            for ev in &r.events {
                let t = ev.index;
                // The run this token belongs to ends at the next multiple of
                // `stride` past it (runs start at token 1).
                let run_end = (1 + (t - 1) / stride * stride + stride).min(tokens.len());
                let lo = (run_end - 1).saturating_sub(window);
                let mut cache = KvCache::new(m.cfg.n_layers, m.cfg.d_model, window);
                let logits = fwd.prefill(&mut cache, &tokens[lo..run_end - 1]);
                let data = logits.as_slice();
                let row = &data[(t - 1 - lo) * m.cfg.vocab..(t - lo) * m.cfg.vocab];
                let want_nll = kernels::nll_from_logits_row(row, tokens[t]);
                assert!(
                    (ev.nll - want_nll).abs() < 1e-6,
                    "window {window} stride {stride} token {t}: {} vs {}",
                    ev.nll,
                    want_nll
                );
                assert_eq!(ev.window, t - lo);
            }
        }
    }

    #[test]
    fn stride_equal_to_window_is_disjoint_chunk_evaluation() {
        let m = tiny_model();
        let tokens: Vec<u32> = (0..25).map(|i| (i * 11 % 48) as u32).collect();
        let w = 8;
        let r = sliding_window_ppl(&m, None, &tokens, &PplOptions {
            window: w,
            stride: w,
            ntk_scale: 1.0,
        })
        .unwrap();
        // Manual disjoint computation: feed [0,8) scoring 1..9 needs input
        // span [0,8) for targets 1..8 — chunk boundaries at 1+k·8.
        let fwd = Forward::new(&m);
        let mut nll = 0.0f64;
        let mut start = 1usize;
        while start < tokens.len() {
            let end = (start + w).min(tokens.len());
            let mut cache = KvCache::new(m.cfg.n_layers, m.cfg.d_model, w);
            let logits = fwd.prefill(&mut cache, &tokens[start - 1..end - 1]);
            let data = logits.as_slice();
            for t in start..end {
                let row = &data[(t - start) * m.cfg.vocab..(t - start + 1) * m.cfg.vocab];
                nll += kernels::nll_from_logits_row(row, tokens[t]);
            }
            start = end;
        }
        assert!((r.nll_sum - nll).abs() < 1e-6, "{} vs {nll}", r.nll_sum);
    }

    #[test]
    fn evaluation_windows_may_exceed_the_trained_window() {
        let m = tiny_model(); // trained window 32
        let tokens: Vec<u32> = (0..50).map(|i| (i * 3 % 48) as u32).collect();
        let r = sliding_window_ppl(&m, None, &tokens, &PplOptions {
            window: 48,
            stride: 16,
            ntk_scale: 2.0,
        })
        .unwrap();
        assert_eq!(r.n_scored, 49);
        assert!(r.ppl().is_finite());
    }

    #[test]
    fn degenerate_ppl_inputs_are_rejected() {
        let m = tiny_model();
        let opts = PplOptions { window: 8, stride: 4, ntk_scale: 1.0 };
        assert!(sliding_window_ppl(&m, None, &[1], &opts).is_err());
        let bad = PplOptions { window: 8, stride: 0, ntk_scale: 1.0 };
        assert!(sliding_window_ppl(&m, None, &[1, 2, 3], &bad).is_err());
        let bad = PplOptions { window: 4, stride: 8, ntk_scale: 1.0 };
        assert!(sliding_window_ppl(&m, None, &[1, 2, 3], &bad).is_err());
        let bad = PplOptions { window: 8, stride: 4, ntk_scale: 0.5 };
        assert!(sliding_window_ppl(&m, None, &[1, 2, 3], &bad).is_err());
    }

    fn fake_events(nlls: &[(usize, f64)]) -> Vec<TokenEvent> {
        let mut cum = 0.0;
        nlls.iter()
            .map(|&(index, nll)| {
                cum += nll;
                TokenEvent { index, version: 0, window: 1, nll, cum_nll: cum }
            })
            .collect()
    }

    #[test]
    fn tokens_bucket_by_absolute_position() {
        // Desk-scale analog of position bucketing: boundaries (2000, 6000,
        // 10000) put token 4000 in the second segment.
        let events = fake_events(&[(100, 1.0), (4000, 2.0), (7000, 3.0), (12000, 4.0)]);
        let rep = segment_report(&events, &[2000, 6000, 10000], "cfg", 1).unwrap();
        assert_eq!(rep.segments.len(), 4);
        assert_eq!((rep.segments[1].start, rep.segments[1].end), (2000, 6000));
        assert_eq!(rep.segments[1].n_tokens, 1);
        assert!((rep.segments[1].ppl - 2.0f64.exp()).abs() < 1e-12);
        // Boundaries must increase strictly.
        assert!(segment_report(&events, &[5, 5], "cfg", 1).is_err());
    }

    #[test]
    fn single_bucket_equals_overall_and_recombination_is_exact() {
        let events = fake_events(&[(1, 0.5), (2, 1.5), (3, 2.5), (4, 0.25), (5, 3.0)]);
        let one = segment_report(&events, &[], "cfg", 7).unwrap();
        assert_eq!(one.segments.len(), 1);
        assert!((one.segments[0].ppl - one.overall_ppl).abs() < 1e-12);

        let many = segment_report(&events, &[2, 4], "cfg", 7).unwrap();
        // Token-weighted recombination of bucket NLLs equals the overall NLL.
        let recombined: f64 = many.segments.iter().map(|s| s.nll_sum).sum();
        assert!((recombined - many.nll_sum).abs() < 1e-9);
        let mean = recombined / many.n_tokens as f64;
        assert!((mean.exp() - many.overall_ppl).abs() < 1e-9);
    }

    #[test]
    fn report_serializes_to_csv_text_and_json() {
        let events = fake_events(&[(1, 1.0), (3, 2.0)]);
        let mut rep = segment_report(&events, &[2], "abc123", 9).unwrap();
        rep.bleu = Some(0.5);
        let csv = rep.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("segment_start,segment_end,n_tokens,ppl"));
        assert!(lines.next().unwrap().starts_with("0,2,1,"));
        assert!(lines.next().unwrap().starts_with("2,4,1,"));
        let text = rep.to_text();
        assert!(text.contains("overall") && text.contains("bleu"));
        let json = rep.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.segments.len(), 2);
        assert_eq!(back.config_hash, "abc123");
        assert_eq!(back.bleu, Some(0.5));
    }

    #[test]
    fn bleu_matches_hand_counted_ngrams() {
        // candidate a b c d e vs reference a b c d f:
        // precisions 4/5, 3/4, 2/3, 1/2; BP = 1.
        let c = [1u32, 2, 3, 4, 5];
        let r = [1u32, 2, 3, 4, 6];
        let got = bleu(&c, &r, 4).unwrap();
        let want = (4.0f64 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0).powf(0.25);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.6687).abs() < 1e-4, "{got}");
    }

    #[test]
    fn bleu_edge_cases_and_brevity_penalty() {
        let r = [1u32, 2, 3, 4];
        assert_eq!(bleu(&r, &r, 4).unwrap(), 1.0);
        assert_eq!(bleu(&[9, 9, 9], &r, 4).unwrap(), 0.0, "zero unigram overlap");
        assert_eq!(bleu(&[], &r, 4).unwrap(), 0.0, "empty candidate");
        assert!(bleu(&r, &[], 4).is_err(), "empty reference");
        assert!(bleu(&r, &r, 0).is_err());
        // Short perfect prefix: precisions all 1, BP = exp(1 − 4/3).
        let got = bleu(&[1, 2, 3], &r, 2).unwrap();
        let want = (1.0f64 - 4.0 / 3.0).exp();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        // A candidate shorter than max_n has no such n-grams: score 0.
        assert_eq!(bleu(&[1, 2, 3], &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_is_invariant_under_vocabulary_relabeling() {
        let c = [1u32, 2, 3, 4, 5, 2, 3];
        let r = [1u32, 2, 3, 5, 4, 2, 1];
        let perm = |t: u32| (t * 7 + 3) % 31;
        let cp: Vec<u32> = c.iter().map(|&t| perm(t)).collect();
        let rp: Vec<u32> = r.iter().map(|&t| perm(t)).collect();
        let a = bleu(&c, &r, 4).unwrap();
        let b = bleu(&cp, &rp, 4).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn relative_change_reports_match_reference_tables() {
        assert_eq!(format_relative_change(relative_change(9.81, 9.23).unwrap()), "-5.9%");
        assert_eq!(format_relative_change(relative_change(4.36, 3.32).unwrap()), "-23.8%");
        assert_eq!(format_relative_change(relative_change(12.4, 19.0).unwrap()), "+53.2%");
        assert!(relative_change(0.0, 1.0).is_err());
        // The raw value round-trips exactly.
        let pct = relative_change(7.5, 6.1).unwrap();
        assert!((7.5 * (1.0 + pct / 100.0) - 6.1).abs() < 1e-12);
    }
}
