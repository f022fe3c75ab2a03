//! Generate a synthetic corpus with a planted private signal and inspect
//! what the construction guarantees: marker frequency, the label-parity
//! correlation of the private bits, and the most-frequent baselines.
//!
//! Run with: cargo run --release --example synth_corpus

use repleak::data::{
    most_frequent_baseline, synth_generate, BaselineTarget, Split, SynthConfig,
};

fn main() -> repleak::Result<()> {
    let cfg = SynthConfig {
        n: 5000,
        classes: 4,
        k: 2,
        label_signal: 0.9,
        private_signal: 0.6,
        rho: 0.3,
        seed: 0,
        ..Default::default()
    };
    let corpus = synth_generate(&cfg)?;

    println!("{} examples, {} classes, K={}", corpus.examples.len(), corpus.labels.len(), corpus.k());
    for (i, e) in corpus.examples.iter().take(3).enumerate() {
        println!("example {i}: y={} z={:?} text={:?}", e.label, e.private, e.text);
    }

    let with_marker = corpus
        .examples
        .iter()
        .filter(|e| e.tokens.iter().any(|t| t.starts_with("z0v")))
        .count();
    println!(
        "z0 marker frequency: {:.3} (configured s_z = {})",
        with_marker as f64 / corpus.examples.len() as f64,
        cfg.private_signal
    );

    let agree = corpus
        .examples
        .iter()
        .filter(|e| e.private[0] == (e.label % 2) as u8)
        .count();
    println!(
        "z0 agrees with label parity: {:.3} (expected (1+rho)/2 = {})",
        agree as f64 / corpus.examples.len() as f64,
        (1.0 + cfg.rho) / 2.0
    );

    let (label, acc) = most_frequent_baseline(&corpus, BaselineTarget::MainLabel, Split::Test)?;
    println!("most-frequent main baseline: class {label}, accuracy {acc:.3}");
    for j in 0..corpus.k() {
        let (v, acc) = most_frequent_baseline(&corpus, BaselineTarget::Private(j), Split::Test)?;
        println!("most-frequent baseline for attr{j}: value {v}, accuracy {acc:.3}");
    }
    Ok(())
}
