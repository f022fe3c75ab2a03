//! Phases 2-3: export frozen representations from a trained classifier,
//! train the eavesdropping attacker on (r, z) pairs, and compare its test
//! accuracy against the most-frequent baseline and a shuffled control.
//!
//! Run with: cargo run --release --example attack_eval

use repleak::attack::{
    attacker_accuracies, privacy_demographic, shuffle_representations, train_attacker,
    AttackConfig,
};
use repleak::data::{most_frequent_baseline, synth_generate, BaselineTarget, Split, SynthConfig};
use repleak::training::{export_representations, train, Regime, TrainConfig};

fn main() -> repleak::Result<()> {
    let corpus = synth_generate(&SynthConfig {
        n: 2000,
        classes: 4,
        k: 2,
        private_signal: 0.6,
        rho: 0.3,
        ..Default::default()
    })?;

    // Phase 1: main classifier, trained for the public label only.
    let mut cfg = TrainConfig::new(Regime::Standard);
    cfg.d = 16;
    cfg.epochs = 6;
    let ckpt = train(&corpus, &cfg)?;
    println!("main dev accuracy: {:.3}", ckpt.dev_accuracy);

    // Phase 2: frozen (r, z) pairs per split.
    let train_r = export_representations(&ckpt, &corpus, Split::Train)?;
    let dev_r = export_representations(&ckpt, &corpus, Split::Dev)?;
    let test_r = export_representations(&ckpt, &corpus, Split::Test)?;

    // Phase 3: the attacker never sees the text, only representations.
    let atk = train_attacker(&train_r, &dev_r, &AttackConfig::default())?;
    let accs = attacker_accuracies(&atk, &test_r)?;
    println!("attacker test accuracy: {accs:?}");
    println!("privacy score: {:.3}", privacy_demographic(&accs)?);

    for (j, acc) in accs.iter().enumerate() {
        let (_, base) = most_frequent_baseline(&corpus, BaselineTarget::Private(j), Split::Test)?;
        println!("attr{j}: attacker {acc:.3} vs baseline {base:.3}");
    }

    // Control: shuffling representations across examples severs the r-z
    // link; the attacker should fall back to the label prior.
    let shuf_train = shuffle_representations(&train_r, 0);
    let shuf_dev = shuffle_representations(&dev_r, 1);
    let shuf_atk = train_attacker(&shuf_train, &shuf_dev, &AttackConfig::default())?;
    let shuf_accs = attacker_accuracies(&shuf_atk, &test_r)?;
    println!("shuffled-control accuracy: {shuf_accs:?}");
    Ok(())
}
