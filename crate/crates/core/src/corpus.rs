//! Synthetic long-document generators with controllable long-range
//! structure, byte-level text ingestion, token-stream file IO, and base-model
//! pretraining.
//!
//! Both generators emit token ids, not natural language: that removes
//! tokenizer confounds and makes the information content analytic. The
//! glossary family plants a per-document source→target symbol mapping whose
//! conditional entropy is zero given the document's own history but `ln M`
//! given only cross-document statistics — headroom that only a mechanism
//! carrying information across the attention window can capture. The novel
//! family is a shared sparse Markov background with per-document recurring
//! entity n-grams.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::SegmentTask;
use crate::error::{Error, Result};
use crate::model::train::loss_on_tape;
use crate::model::{ModelConfig, ModelParams};
use crate::rng;
use crate::tensor::optim::{AdamW, AdamWConfig};
use crate::tensor::tape::Graph;
use crate::tensor::Tensor;

/// Token id opening a source segment in glossary documents.
pub const SEP_SRC: u32 = 0;
/// Token id opening a target segment in glossary documents.
pub const SEP_TGT: u32 = 1;

/// Specification of one glossary document: alternating source and target
/// segments where the target side applies a mapping sampled fresh per
/// document.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GlossarySpec {
    pub seed: u64,
    /// Source/target segment pairs in the document.
    pub n_pairs: usize,
    /// Total vocabulary; ids 0/1 are separators, then `mapping_size` source
    /// symbols, `mapping_size` target symbols, and the rest is filler.
    pub vocab: usize,
    /// Number of source→target symbol pairs (M).
    pub mapping_size: usize,
    /// Source tokens per segment.
    pub segment_len: usize,
    /// Probability that a source position carries a dictionary symbol rather
    /// than filler.
    pub dict_share: f64,
}

impl GlossarySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.segment_len == 0 {
            return Err(Error::config("a glossary document needs n_pairs >= 1 and segment_len >= 1"));
        }
        if self.mapping_size < 2 {
            return Err(Error::config("mapping_size must be at least 2"));
        }
        if self.mapping_size * 4 > self.vocab {
            return Err(Error::config(format!(
                "mapping_size {} must be at most a quarter of the vocab {}",
                self.mapping_size, self.vocab
            )));
        }
        if 2 + 2 * self.mapping_size >= self.vocab {
            return Err(Error::config(format!(
                "vocab {} leaves no filler ids beyond separators and {} symbol pairs",
                self.vocab, self.mapping_size
            )));
        }
        if !(0.0..=1.0).contains(&self.dict_share) {
            return Err(Error::config("dict_share must lie in [0, 1]"));
        }
        Ok(())
    }

    /// First source symbol id.
    pub fn source_base(&self) -> u32 {
        2
    }

    /// First target symbol id.
    pub fn target_base(&self) -> u32 {
        2 + self.mapping_size as u32
    }

    /// First filler id.
    pub fn filler_base(&self) -> u32 {
        2 + 2 * self.mapping_size as u32
    }
}

/// A generated glossary document.
#[derive(Clone, Debug)]
pub struct GlossaryDoc {
    pub tokens: Vec<u32>,
    /// `(start, end)` token span of each pair's target segment.
    pub target_spans: Vec<(usize, usize)>,
    /// `mapping[i]` is the target symbol this document assigns to source
    /// symbol `source_base() + i`. Sampled independently per document and
    /// per symbol.
    pub mapping: Vec<u32>,
}

impl GlossaryDoc {
    /// The target segments as generation tasks: produce each target segment
    /// given everything before it.
    pub fn segment_tasks(&self) -> Vec<SegmentTask> {
        self.target_spans
            .iter()
            .map(|&(s, e)| SegmentTask { prefix_end: s, target_end: e })
            .collect()
    }

    /// Flatten the target spans to the sidecar offset list.
    pub fn boundary_offsets(&self) -> Vec<usize> {
        self.target_spans.iter().flat_map(|&(s, e)| [s, e]).collect()
    }
}

/// Generate one glossary document. Deterministic per spec (including seed).
pub fn gen_glossary_doc(spec: &GlossarySpec) -> Result<GlossaryDoc> {
    spec.validate()?;
    let mut r = rng::derive(spec.seed, "corpus.glossary");
    let m = spec.mapping_size as u32;
    let n_filler = spec.vocab as u32 - spec.filler_base();
    // Each source symbol draws its target independently, so knowing other
    // pairs' translations says nothing about this one.
    let mapping: Vec<u32> =
        (0..m).map(|_| spec.target_base() + r.gen_range(0..m)).collect();

    let mut tokens = Vec::with_capacity(spec.n_pairs * (spec.segment_len * 2 + 2));
    let mut target_spans = Vec::with_capacity(spec.n_pairs);
    for _ in 0..spec.n_pairs {
        tokens.push(SEP_SRC);
        let mut dict_positions: Vec<u32> = Vec::new();
        for _ in 0..spec.segment_len {
            if r.gen::<f64>() < spec.dict_share {
                let sym = r.gen_range(0..m);
                dict_positions.push(sym);
                tokens.push(spec.source_base() + sym);
            } else {
                tokens.push(spec.filler_base() + r.gen_range(0..n_filler));
            }
        }
        tokens.push(SEP_TGT);
        let start = tokens.len();
        for sym in dict_positions {
            tokens.push(mapping[sym as usize]);
        }
        target_spans.push((start, tokens.len()));
    }
    Ok(GlossaryDoc { tokens, target_spans, mapping })
}

/// Specification of one novel-like document: a shared sparse order-2 Markov
/// background with per-document recurring entity n-grams.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NovelSpec {
    pub seed: u64,
    pub length: usize,
    pub vocab: usize,
    /// Distinct recurring n-grams planted in this document.
    pub n_entities: usize,
    /// Tokens per entity n-gram.
    pub entity_len: usize,
    /// Probability that an emission decision inserts an entity instead of
    /// one background token.
    pub recurrence: f64,
    /// Seed of the background transition structure. Documents sharing it
    /// share the background statistics (so a pretrained model transfers);
    /// entity inventories still differ per document seed.
    pub background_seed: u64,
}

impl NovelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("a document needs at least one token"));
        }
        if self.vocab < 16 {
            return Err(Error::config("the novel generator needs a vocab of at least 16"));
        }
        if self.n_entities > 0 && self.entity_len < 2 {
            return Err(Error::config("entity n-grams need at least two tokens"));
        }
        if !(0.0..=1.0).contains(&self.recurrence) {
            return Err(Error::config("recurrence must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Branching factor of the background Markov source: each two-token state
/// allows this many successors, chosen uniformly.
pub const MARKOV_BRANCH: u64 = 8;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// The `j`-th allowed successor of state `(a, b)` under a background
/// structure seed. Pure: the transition table is never materialized.
pub fn markov_successor(background_seed: u64, a: u32, b: u32, j: u64, vocab: usize) -> u32 {
    let state = mix64(background_seed ^ mix64(((a as u64) << 32) | b as u64));
    (mix64(state ^ j) % vocab as u64) as u32
}

/// A generated novel-like document plus its entity inventory.
#[derive(Clone, Debug)]
pub struct NovelDoc {
    pub tokens: Vec<u32>,
    pub entities: Vec<Vec<u32>>,
    /// Entity insertions actually performed (full or truncated by the end).
    pub n_insertions: usize,
}

/// Generate one novel-like document. Deterministic per spec.
pub fn gen_novel_doc(spec: &NovelSpec) -> Result<NovelDoc> {
    spec.validate()?;
    let mut r = rng::derive(spec.seed, "corpus.novel");
    let mut entities: Vec<Vec<u32>> = Vec::with_capacity(spec.n_entities);
    while entities.len() < spec.n_entities {
        let e: Vec<u32> =
            (0..spec.entity_len).map(|_| r.gen_range(0..spec.vocab as u32)).collect();
        if !entities.contains(&e) {
            entities.push(e);
        }
    }

    let mut tokens: Vec<u32> = Vec::with_capacity(spec.length);
    let mut n_insertions = 0usize;
    while tokens.len() < spec.length {
        let may_insert = !entities.is_empty() && tokens.len() >= 2;
        if may_insert && r.gen::<f64>() < spec.recurrence {
            let e = &entities[r.gen_range(0..entities.len())];
            let room = spec.length - tokens.len();
            tokens.extend_from_slice(&e[..e.len().min(room)]);
            n_insertions += 1;
        } else {
            let next = if tokens.len() < 2 {
                r.gen_range(0..spec.vocab as u32)
            } else {
                let (a, b) = (tokens[tokens.len() - 2], tokens[tokens.len() - 1]);
                let j = r.gen_range(0..MARKOV_BRANCH);
                markov_successor(spec.background_seed, a, b, j, spec.vocab)
            };
            tokens.push(next);
        }
    }
    Ok(NovelDoc { tokens, entities, n_insertions })
}

/// Byte-level ingestion: one token per byte (ids 0..255).
pub fn ingest_text(path: &Path) -> Result<Vec<u32>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(bytes.into_iter().map(u32::from).collect())
}

/// Inverse of [`ingest_text`]: tokens back to bytes. Errors on ids ≥ 256.
pub fn detokenize_bytes(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| {
                Error::config(format!("token id {t} is not a byte; cannot detokenize"))
            })
        })
        .collect()
}

const TOKENS_MAGIC: &[u8; 4] = b"TLC1";

/// Write a token stream: magic, little-endian u32 vocab, u32 count, then the
/// tokens as little-endian u32. Bit-exact round trip.
pub fn save_tokens(path: &Path, vocab: u32, tokens: &[u32]) -> Result<()> {
    if tokens.iter().any(|&t| t >= vocab) {
        return Err(Error::config("token stream contains ids outside its declared vocab"));
    }
    let count =
        u32::try_from(tokens.len()).map_err(|_| Error::config("token stream too long"))?;
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(format!("write {}", path.display()), e);
    w.write_all(TOKENS_MAGIC).map_err(io)?;
    w.write_all(&vocab.to_le_bytes()).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for t in tokens {
        w.write_all(&t.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a token stream written by [`save_tokens`].
pub fn load_tokens(path: &Path) -> Result<(u32, Vec<u32>)> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut r = BufReader::new(f);
    let io = |e| Error::io(format!("read {}", path.display()), e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != TOKENS_MAGIC {
        return Err(Error::config(format!(
            "{} is not a token-stream file (bad magic)",
            path.display()
        )));
    }
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(io)?;
    let vocab = u32::from_le_bytes(buf);
    if vocab == 0 {
        return Err(Error::config("token-stream file declares an empty vocab"));
    }
    r.read_exact(&mut buf).map_err(io)?;
    let count = u32::from_le_bytes(buf) as usize;
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(io)?;
        let t = u32::from_le_bytes(buf);
        if t >= vocab {
            return Err(Error::config(format!(
                "token id {t} is out of range for the declared vocab {vocab}"
            )));
        }
        tokens.push(t);
    }
    if r.read(&mut [0u8; 1]).map_err(io)? != 0 {
        return Err(Error::config(format!(
            "{} has trailing bytes after the declared token count",
            path.display()
        )));
    }
    Ok((vocab, tokens))
}

/// Write segment boundaries as line-delimited integer offsets.
pub fn save_boundaries(path: &Path, offsets: &[usize]) -> Result<()> {
    let mut s = String::new();
    for o in offsets {
        s.push_str(&format!("{o}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Read a boundary sidecar written by [`save_boundaries`].
pub fn load_boundaries(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: usize = line.parse().map_err(|_| {
            Error::config(format!("{} line {}: '{line}' is not an offset", path.display(), i + 1))
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Pair up a flat offset list into generation tasks. Offsets must be
/// strictly increasing and even in number.
pub fn tasks_from_boundaries(offsets: &[usize]) -> Result<Vec<SegmentTask>> {
    if offsets.len() % 2 != 0 {
        return Err(Error::config("boundary offsets must come in start/end pairs"));
    }
    if offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("boundary offsets must be strictly increasing"));
    }
    Ok(offsets
        .chunks_exact(2)
        .map(|c| SegmentTask { prefix_end: c[0], target_end: c[1] })
        .collect())
}

/// Document seed for the `i`-th pretraining document of a run. Train and
/// evaluation seeds live in separate derivation namespaces, so no evaluation
/// document can appear in pretraining.
pub fn train_doc_seed(run_seed: u64, i: u64) -> u64 {
    rng::derive_indexed(run_seed, "corpus.train", i).gen()
}

/// Document seed for the `i`-th evaluation document of a run.
pub fn eval_doc_seed(run_seed: u64, i: u64) -> u64 {
    rng::derive_indexed(run_seed, "corpus.eval", i).gen()
}

/// Which document family to sample (vocab always follows the model).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum CorpusKind {
    Glossary { mapping_size: usize, segment_len: usize, dict_share: f64 },
    Novel { n_entities: usize, entity_len: usize, recurrence: f64, background_seed: u64 },
}

/// Sample a document of exactly `len` tokens from a family.
pub fn sample_doc(kind: &CorpusKind, vocab: usize, len: usize, doc_seed: u64) -> Result<Vec<u32>> {
    match *kind {
        CorpusKind::Glossary { mapping_size, segment_len, dict_share } => {
            // Each pair emits at least segment_len + 2 tokens; overshoot and
            // truncate.
            let n_pairs = len / (segment_len + 2) + 2;
            let spec = GlossarySpec {
                seed: doc_seed,
                n_pairs,
                vocab,
                mapping_size,
                segment_len,
                dict_share,
            };
            let mut doc = gen_glossary_doc(&spec)?.tokens;
            doc.truncate(len);
            Ok(doc)
        }
        CorpusKind::Novel { n_entities, entity_len, recurrence, background_seed } => {
            let spec = NovelSpec {
                seed: doc_seed,
                length: len,
                vocab,
                n_entities,
                entity_len,
                recurrence,
                background_seed,
            };
            Ok(gen_novel_doc(&spec)?.tokens)
        }
    }
}

/// Base-model pretraining settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u32,
    pub lr: f32,
    /// Linear learning-rate ramp over the first this-many steps.
    pub warmup_steps: u32,
    /// Tokens per training document; 0 resolves to the model window + 1.
    pub doc_tokens: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 200, lr: 3e-3, warmup_steps: 20, doc_tokens: 0 }
    }
}

/// Train a fresh base model with standard next-token loss on freshly sampled
/// documents (one document per step, full-sequence supervision, all weights
/// trainable). Returns the model and the per-step loss curve. Deterministic
/// given the seed.
pub fn pretrain_base(
    mcfg: &ModelConfig,
    kind: &CorpusKind,
    pcfg: &PretrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    if pcfg.steps == 0 {
        return Err(Error::config("pretraining needs at least one step"));
    }
    if !pcfg.lr.is_finite() || pcfg.lr <= 0.0 {
        return Err(Error::config("pretraining lr must be positive"));
    }
    let doc_tokens = if pcfg.doc_tokens == 0 { mcfg.window + 1 } else { pcfg.doc_tokens };
    if doc_tokens < 2 {
        return Err(Error::config("pretraining documents need at least two tokens"));
    }
    if doc_tokens > mcfg.window + 1 {
        return Err(Error::config(format!(
            "pretraining documents of {doc_tokens} tokens exceed the model window {} (+1 target)",
            mcfg.window
        )));
    }

    let mut model = ModelParams::init(mcfg, seed)?;
    let mut opt = AdamW::new(AdamWConfig { lr: pcfg.lr, ..AdamWConfig::<f32>::default() });
    let mut curve = Vec::with_capacity(pcfg.steps as usize);
    for step in 0..pcfg.steps {
        let doc = sample_doc(kind, mcfg.vocab, doc_tokens, train_doc_seed(seed, step as u64))?;
        let mut g = Graph::new();
        let (loss, binding) =
            loss_on_tape::<rand_chacha::ChaCha8Rng>(&mut g, &model, None, &doc, 0, true, None)?;
        curve.push(g.value(loss).as_slice()[0] as f64);
        g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = binding
            .base
            .iter()
            .map(|id| g.grad(*id).expect("trainable base leaf has a gradient").clone())
            .collect();
        drop(g);
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        let mut named = model.named_mut();
        let mut params: Vec<&mut Tensor<f32>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        let warm = if pcfg.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f32 / pcfg.warmup_steps as f32).min(1.0)
        };
        opt.step(&mut params, &grad_refs, warm);
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_glossary(seed: u64) -> GlossarySpec {
        GlossarySpec {
            seed,
            n_pairs: 12,
            vocab: 96,
            mapping_size: 16,
            segment_len: 10,
            dict_share: 0.5,
        }
    }

    #[test]
    fn glossary_documents_are_deterministic_per_seed() {
        let a = gen_glossary_doc(&small_glossary(5)).unwrap();
        let b = gen_glossary_doc(&small_glossary(5)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.target_spans, b.target_spans);
        assert_eq!(a.mapping, b.mapping);
        let c = gen_glossary_doc(&small_glossary(6)).unwrap();
        assert_ne!(a.tokens, c.tokens);
    }

    #[test]
    fn every_target_token_applies_the_document_mapping() {
        // Re-parse the document from scratch and verify structurally.
        let spec = small_glossary(11);
        let doc = gen_glossary_doc(&spec).unwrap();
        let (src0, tgt0, fil0) = (spec.source_base(), spec.target_base(), spec.filler_base());
        let mut i = 0usize;
        let mut pair = 0usize;
        while i < doc.tokens.len() {
            assert_eq!(doc.tokens[i], SEP_SRC, "pair {pair} must open with the source separator");
            i += 1;
            let mut expected_targets = Vec::new();
            for _ in 0..spec.segment_len {
                let t = doc.tokens[i];
                if t >= src0 && t < tgt0 {
                    expected_targets.push(doc.mapping[(t - src0) as usize]);
                } else {
                    assert!(t >= fil0 && (t as usize) < spec.vocab, "filler out of range: {t}");
                }
                i += 1;
            }
            assert_eq!(doc.tokens[i], SEP_TGT);
            i += 1;
            assert_eq!(doc.target_spans[pair].0, i);
            for want in expected_targets {
                assert_eq!(doc.tokens[i], want, "target must be the mapped symbol, in order");
                i += 1;
            }
            assert_eq!(doc.target_spans[pair].1, i);
            pair += 1;
        }
        assert_eq!(pair, spec.n_pairs);
        // Tasks view matches the spans.
        let tasks = doc.segment_tasks();
        assert_eq!(tasks.len(), spec.n_pairs);
        assert_eq!(tasks[0].prefix_end, doc.target_spans[0].0);
    }

    #[test]
    fn mappings_are_independent_across_documents() {
        // Across many documents, a fixed source symbol's translation covers
        // the whole target inventory roughly uniformly: cross-document
        // statistics carry no information about this document's mapping.
        let m = 16usize;
        let n_docs = 480;
        let mut counts = vec![0usize; m];
        for d in 0..n_docs {
            let doc = gen_glossary_doc(&small_glossary(1000 + d)).unwrap();
            let spec = small_glossary(0);
            counts[(doc.mapping[0] - spec.target_base()) as usize] += 1;
        }
        let expected = n_docs as f64 / m as f64; // 30 per target
        assert!(counts.iter().all(|&c| c > 0), "every target appears: {counts:?}");
        assert!(
            counts.iter().all(|&c| (c as f64) < 2.5 * expected),
            "no target dominates: {counts:?}"
        );
    }

    #[test]
    fn glossary_spec_conflicts_are_rejected() {
        let mut s = small_glossary(1);
        s.mapping_size = 40; // > vocab/4
        assert!(gen_glossary_doc(&s).is_err());
        let mut s = small_glossary(1);
        s.vocab = 34; // no filler room beyond 2 + 32 symbol ids
        assert!(gen_glossary_doc(&s).is_err());
        let mut s = small_glossary(1);
        s.dict_share = 1.5;
        assert!(gen_glossary_doc(&s).is_err());
        let mut s = small_glossary(1);
        s.n_pairs = 0;
        assert!(gen_glossary_doc(&s).is_err());
    }

    fn small_novel(seed: u64) -> NovelSpec {
        NovelSpec {
            seed,
            length: 32_768,
            vocab: 256,
            n_entities: 8,
            entity_len: 6,
            recurrence: 0.02,
            background_seed: 77,
        }
    }

    #[test]
    fn novel_documents_are_deterministic_with_fresh_entities_per_seed() {
        let a = gen_novel_doc(&small_novel(3)).unwrap();
        let b = gen_novel_doc(&small_novel(3)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.entities, b.entities);
        let c = gen_novel_doc(&small_novel(4)).unwrap();
        assert_ne!(a.entities, c.entities, "entity inventories differ across documents");
        assert_eq!(a.tokens.len(), 32_768);
    }

    #[test]
    fn entity_insertion_rate_matches_the_spec_within_tolerance() {
        let spec = small_novel(9);
        let doc = gen_novel_doc(&spec).unwrap();
        // Every emission decision inserts with probability r (consuming k
        // tokens) or emits one background token, so the expected number of
        // decisions d solves d·(1−r) + d·r·k = length.
        let (r, k) = (spec.recurrence, spec.entity_len as f64);
        let decisions = spec.length as f64 / ((1.0 - r) + r * k);
        let expected = decisions * r;
        let got = doc.n_insertions as f64;
        assert!(
            (got - expected).abs() <= 0.2 * expected,
            "insertions {got} vs expected {expected}"
        );
        // And the insertions are really in the text: scanning finds at least
        // as many full entity occurrences as non-truncated insertions.
        let mut found = 0usize;
        for e in &doc.entities {
            found += doc.tokens.windows(e.len()).filter(|w| w == &e.as_slice()).count();
        }
        assert!(found as f64 >= got - 1.0, "found {found} occurrences of {got} insertions");
    }

    #[test]
    fn entity_continuations_are_determined_by_their_prefix() {
        // Wherever the first k−1 tokens of an entity appear, the k-th token
        // follows: a reader who has stored the inventory predicts it with
        // certainty.
        let spec = small_novel(21);
        let doc = gen_novel_doc(&spec).unwrap();
        let k = spec.entity_len;
        let mut checked = 0usize;
        for e in &doc.entities {
            let prefix = &e[..k - 1];
            for (i, w) in doc.tokens.windows(k - 1).enumerate() {
                if w == prefix && i + k - 1 < doc.tokens.len() {
                    assert_eq!(doc.tokens[i + k - 1], e[k - 1], "entity {e:?} at {i}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 50, "the document must actually exercise the property ({checked})");
    }

    #[test]
    fn markov_background_is_shared_across_documents() {
        // Two documents with different seeds but one background structure
        // draw successors from the same per-state candidate sets.
        let a = gen_novel_doc(&NovelSpec { n_entities: 0, ..small_novel(1) }).unwrap();
        for i in 2..200 {
            let (s0, s1, nxt) = (a.tokens[i - 2], a.tokens[i - 1], a.tokens[i]);
            let allowed: Vec<u32> = (0..MARKOV_BRANCH)
                .map(|j| markov_successor(77, s0, s1, j, 256))
                .collect();
            assert!(allowed.contains(&nxt), "token {i} must be an allowed successor");
        }
    }

    #[test]
    fn text_ingestion_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let data: Vec<u8> = (0..=255u8).cycle().take(1000).collect();
        std::fs::write(&p, &data).unwrap();
        let toks = ingest_text(&p).unwrap();
        assert_eq!(toks.len(), 1000);
        assert_eq!(detokenize_bytes(&toks).unwrap(), data);
        std::fs::write(&p, b"").unwrap();
        assert!(ingest_text(&p).unwrap().is_empty());
        assert!(detokenize_bytes(&[300]).is_err());
        assert!(ingest_text(Path::new("/nonexistent/file")).is_err());
    }

    #[test]
    fn token_files_round_trip_and_reject_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tlc");
        let tokens: Vec<u32> = (0..500u32).map(|i| i % 96).collect();
        save_tokens(&p, 96, &tokens).unwrap();
        let (v, back) = load_tokens(&p).unwrap();
        assert_eq!(v, 96);
        assert_eq!(back, tokens);

        assert!(save_tokens(&p, 10, &tokens).is_err(), "ids beyond the declared vocab");

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_tokens(&p).is_err(), "bad magic");

        save_tokens(&p, 96, &tokens).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_tokens(&p).is_err(), "truncation");

        save_tokens(&p, 96, &tokens).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_tokens(&p).is_err(), "trailing bytes");
    }

    #[test]
    fn boundary_sidecars_round_trip_and_pair_into_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.txt");
        let offsets = vec![12, 20, 55, 60];
        save_boundaries(&p, &offsets).unwrap();
        assert_eq!(load_boundaries(&p).unwrap(), offsets);
        let tasks = tasks_from_boundaries(&offsets).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!((tasks[1].prefix_end, tasks[1].target_end), (55, 60));
        assert!(tasks_from_boundaries(&[1, 2, 3]).is_err(), "odd count");
        assert!(tasks_from_boundaries(&[5, 5]).is_err(), "not increasing");
        std::fs::write(&p, "12\nnope\n").unwrap();
        assert!(load_boundaries(&p).is_err());
    }

    #[test]
    fn train_and_eval_seed_namespaces_are_disjoint() {
        for i in 0..16 {
            assert_ne!(train_doc_seed(42, i), eval_doc_seed(42, i));
        }
        // And stable: the same run seed always yields the same documents.
        assert_eq!(train_doc_seed(42, 3), train_doc_seed(42, 3));
    }

    #[test]
    fn pretraining_reduces_loss_and_is_bit_deterministic() {
        let mcfg = ModelConfig {
            vocab: 48,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            window: 32,
            ..ModelConfig::default()
        };
        let kind = CorpusKind::Novel {
            n_entities: 2,
            entity_len: 4,
            recurrence: 0.02,
            background_seed: 7,
        };
        let pcfg = PretrainConfig { steps: 40, lr: 3e-3, warmup_steps: 5, doc_tokens: 0 };
        let (m1, curve) = pretrain_base(&mcfg, &kind, &pcfg, 123).unwrap();
        assert_eq!(curve.len(), 40);
        let head: f64 = curve[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = curve[35..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss must fall: {head} -> {tail}");

        let (m2, _) = pretrain_base(&mcfg, &kind, &pcfg, 123).unwrap();
        assert_eq!(m1.checksum(), m2.checksum(), "same seed, bit-identical weights");

        // Held-out text from the same background beats a uniform guesser.
        let doc = sample_doc(&kind, 48, 400, eval_doc_seed(123, 0)).unwrap();
        let r = crate::eval::sliding_window_ppl(&m1, None, &doc, &crate::eval::PplOptions {
            window: 32,
            stride: 16,
            ntk_scale: 1.0,
        })
        .unwrap();
        assert!(r.ppl() < 0.9 * 48.0, "held-out ppl {} should be well under the vocab", r.ppl());
    }

    #[test]
    fn pretraining_rejects_degenerate_settings() {
        let mcfg = ModelConfig { vocab: 48, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 24, window: 16, ..ModelConfig::default() };
        let kind = CorpusKind::Novel { n_entities: 1, entity_len: 2, recurrence: 0.0, background_seed: 1 };
        let bad = PretrainConfig { steps: 0, ..PretrainConfig::default() };
        assert!(pretrain_base(&mcfg, &kind, &bad, 1).is_err());
        let bad = PretrainConfig { doc_tokens: 64, ..PretrainConfig::default() };
        assert!(pretrain_base(&mcfg, &kind, &bad, 1).is_err(), "documents beyond the window");
    }
}
