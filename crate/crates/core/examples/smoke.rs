//! End-to-end smoke drive: initialize a small model, generate text with a
//! progressively trained adapter, replay the run, and score a document.
//!
//! Run with: cargo run --release -p templora --example smoke

use std::sync::Arc;

use templora::engine::{EngineConfig, ReplaySchedule, Session};
use templora::lora::LoraConfig;
use templora::model::{ModelConfig, ModelParams};

fn main() {
    let mcfg = ModelConfig {
        vocab: 256,
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        window: 64,
        ..ModelConfig::default()
    };
    let model = Arc::new(ModelParams::init(&mcfg, 7).expect("model init"));
    println!("model: {} parameters", model.n_parameters());

    let cfg = EngineConfig {
        chunk_size: 16,
        train_context: 16,
        lora: LoraConfig { rank: 8, dropout: 0.0, epochs: 1, ..LoraConfig::default() },
        ..EngineConfig::default()
    };
    let session = Session::new(model.clone(), cfg).expect("session");

    // Generate past the window so the adapter actually trains.
    let prompt: Vec<u32> = (0..72u32).map(|i| i * 3 % 256).collect();
    let out = session.generate(&prompt, 40, 42).expect("generate");
    println!(
        "generated {} tokens, trained {} chunks, {} adapter params, peak {} KiB",
        out.tokens.len(),
        out.trained_chunks.len(),
        out.stats.adapter_parameters,
        out.stats.peak_bytes / 1024
    );
    assert!(out.stats.n_train_updates > 0, "the run must have trained");

    // The recorded trace replays token-exact.
    let schedule = ReplaySchedule::from_output(&out);
    let replayed = session.replay(&prompt, 40, 42, &schedule).expect("replay");
    assert_eq!(replayed.tokens, out.tokens, "replay must be token-exact");
    println!("replay: token-exact over {} tokens", replayed.tokens.len());

    // Teacher-forced scoring with and without adapter training.
    let doc: Vec<u32> = (0..200u32).map(|i| i * 7 % 256).collect();
    let adapted = session.stream_score(&doc, true, 1).expect("score");
    let baseline = session.stream_score(&doc, false, 1).expect("score");
    println!(
        "scoring: adapted ppl {:.3} vs baseline ppl {:.3} over {} tokens",
        adapted.ppl(),
        baseline.ppl(),
        adapted.n_scored
    );
    println!("smoke drive complete");
}
