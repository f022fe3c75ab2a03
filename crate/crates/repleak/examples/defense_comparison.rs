//! Train the main classifier under each defense regime and report the
//! utility/privacy tradeoff on one synthetic corpus.
//!
//! Run with: cargo run --release --example defense_comparison
//! (takes a few minutes; it trains four models plus four attackers)

use repleak::attack::{attacker_accuracies, evaluate_accuracy, train_attacker, AttackConfig};
use repleak::data::{synth_generate, Split, SynthConfig};
use repleak::training::{export_representations, train, Regime, TrainConfig};

fn main() -> repleak::Result<()> {
    let corpus = synth_generate(&SynthConfig {
        n: 3000,
        classes: 4,
        k: 2,
        label_signal: 0.9,
        private_signal: 0.6,
        rho: 0.3,
        ..Default::default()
    })?;

    println!("{:<14} {:>10} {:>16}", "regime", "main acc", "attacker acc");
    for regime in [Regime::Standard, Regime::Multidetask, Regime::Advgen, Regime::Decluster] {
        let mut cfg = TrainConfig::new(regime);
        cfg.d = 16;
        cfg.epochs = 10;
        let ckpt = train(&corpus, &cfg)?;

        let train_r = export_representations(&ckpt, &corpus, Split::Train)?;
        let dev_r = export_representations(&ckpt, &corpus, Split::Dev)?;
        let test_r = export_representations(&ckpt, &corpus, Split::Test)?;
        let atk = train_attacker(&train_r, &dev_r, &AttackConfig::default())?;
        let accs = attacker_accuracies(&atk, &test_r)?;
        let main = evaluate_accuracy(&ckpt, &corpus, Split::Test)?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{:<14} {main:>10.3} {mean:>16.3}", regime.to_string());
    }
    Ok(())
}
