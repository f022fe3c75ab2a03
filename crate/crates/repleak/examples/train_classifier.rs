//! Phase 1: train the main LSTM classifier on a synthetic corpus and save
//! a self-describing checkpoint.
//!
//! Run with: cargo run --release --example train_classifier

use repleak::data::{synth_generate, SynthConfig};
use repleak::training::{train, MainCheckpoint, Regime, TrainConfig};

fn main() -> repleak::Result<()> {
    let corpus = synth_generate(&SynthConfig {
        n: 2000,
        classes: 4,
        k: 2,
        rho: 0.3,
        ..Default::default()
    })?;

    let mut cfg = TrainConfig::new(Regime::Standard);
    cfg.d = 16;
    cfg.epochs = 6;

    let ckpt = train(&corpus, &cfg)?;
    for (i, (loss, acc)) in ckpt
        .epoch_train_loss
        .iter()
        .zip(&ckpt.epoch_dev_accuracy)
        .enumerate()
    {
        println!("epoch {:>2}: train loss {loss:.4}, dev accuracy {acc:.4}", i + 1);
    }
    println!(
        "selected epoch {} with dev accuracy {:.4}",
        ckpt.epoch, ckpt.dev_accuracy
    );

    let path = std::env::temp_dir().join("repleak_example_ckpt.json");
    ckpt.save(&path)?;
    let reloaded = MainCheckpoint::load(&path)?;
    assert_eq!(reloaded.epoch, ckpt.epoch);
    println!("checkpoint saved to {} and reloaded", path.display());
    Ok(())
}
