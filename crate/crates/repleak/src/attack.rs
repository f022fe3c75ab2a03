//! Phase-3 attacker training on frozen representations, baselines, and the
//! privacy metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AttrKind, Corpus, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{head_forward, lstm_encode, Head};
use crate::optim::Adam;
use crate::tape::{sigmoid_scalar, Tape};
use crate::tensor::{Params, Tensor};
use crate::training::{model_accuracy, MainCheckpoint, ReprRecord};

/// Sigmoid outputs at or above this are predicted positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub kind: AttrKind,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { epochs: 16, batch: 16, seed: 0, kind: AttrKind::Demographic }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackerCheckpoint {
    pub params: Params,
    pub head: Head,
    pub dev_privacy: f64,
    /// 1-based index of the selected epoch.
    pub epoch: usize,
    pub epoch_dev_privacy: Vec<f64>,
}

/// Attacker selection rule: argmin of dev privacy (the most successful
/// attacker), ties broken toward the earlier epoch. 1-based.
pub fn select_worst_privacy_epoch(dev_privacies: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in dev_privacies.iter().enumerate() {
        if *p < dev_privacies[best] {
            best = i;
        }
    }
    best + 1
}

fn check_records(records: &[ReprRecord], what: &str) -> Result<(usize, usize)> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidInput(format!("empty {what} representation set")))?;
    let (d, k) = (first.r.len(), first.z.len());
    for rec in records {
        if rec.r.len() != d || rec.z.len() != k {
            return Err(Error::shape(format!(
                "inconsistent record widths in {what} representation set"
            )));
        }
    }
    Ok((d, k))
}

/// Train a fresh feedforward attacker on (r, z) pairs for `cfg.epochs`
/// epochs of minibatch Adam, evaluating dev privacy after every epoch and
/// returning the epoch with the worst privacy.
pub fn train_attacker(
    train: &[ReprRecord],
    dev: &[ReprRecord],
    cfg: &AttackConfig,
) -> Result<AttackerCheckpoint> {
    let (d, k) = check_records(train, "train")?;
    let (dd, dk) = check_records(dev, "dev")?;
    if d != dd || k != dk {
        return Err(Error::shape(format!(
            "train representations are {d}x{k}, dev are {dd}x{dk}"
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x41545441); // "ATTA"
    let mut params = Params::new();
    let head = Head::init(&mut params, &mut init_rng, "atk", d, k)?;
    let mut adam = Adam::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x53485546);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Params)> = None;
    let mut epoch_dev_privacy = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch) {
            for &i in batch {
                let mut tape = Tape::new();
                let bind = tape.bind(&params, true);
                let r = tape.constant(Tensor::vector(train[i].r.clone()));
                let logits = head_forward(&mut tape, &bind, &head, r)?;
                let probs = tape.sigmoid(logits);
                let loss = tape.nll_multilabel(probs, &train[i].z)?;
                tape.backward(loss, &mut params)?;
            }
            adam.step(&mut params)?;
        }
        let model = AttackerCheckpoint {
            params: params.clone(),
            head: head.clone(),
            dev_privacy: 0.0,
            epoch,
            epoch_dev_privacy: Vec::new(),
        };
        let privacy = attacker_privacy(&model, dev, cfg.kind)?;
        epoch_dev_privacy.push(privacy);
        let better = match &best {
            None => true,
            Some((p, _, _)) => privacy < *p,
        };
        if better {
            best = Some((privacy, epoch, params.clone()));
        }
    }

    let (dev_privacy, epoch, params) = best.unwrap();
    debug_assert_eq!(epoch, select_worst_privacy_epoch(&epoch_dev_privacy));
    Ok(AttackerCheckpoint { params, head, dev_privacy, epoch, epoch_dev_privacy })
}

/// Sigmoid probabilities of the K attributes for one representation.
pub fn attacker_probs(ckpt: &AttackerCheckpoint, r: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bind = tape.bind(&ckpt.params, false);
    let rn = tape.constant(Tensor::vector(r.to_vec()));
    let logits = head_forward(&mut tape, &bind, &ckpt.head, rn)?;
    Ok(tape.value(logits).data.iter().map(|v| sigmoid_scalar(*v)).collect())
}

/// Per-attribute accuracy of a trained attacker at the 0.5 threshold.
pub fn attacker_accuracies(
    ckpt: &AttackerCheckpoint,
    records: &[ReprRecord],
) -> Result<Vec<f64>> {
    let (_, k) = check_records(records, "evaluation")?;
    let mut correct = vec![0usize; k];
    for rec in records {
        let probs = attacker_probs(ckpt, &rec.r)?;
        for (j, p) in probs.iter().enumerate() {
            let pred = (*p >= DECISION_THRESHOLD) as u8;
            if pred == rec.z[j] {
                correct[j] += 1;
            }
        }
    }
    Ok(correct.iter().map(|c| *c as f64 / records.len() as f64).collect())
}

/// Binary predictions for F-score computation.
fn attacker_predictions(
    ckpt: &AttackerCheckpoint,
    records: &[ReprRecord],
) -> Result<Vec<Vec<u8>>> {
    records
        .iter()
        .map(|rec| {
            Ok(attacker_probs(ckpt, &rec.r)?
                .into_iter()
                .map(|p| (p >= DECISION_THRESHOLD) as u8)
                .collect())
        })
        .collect()
}

/// Privacy of a trained attacker on a representation set, using the metric
/// for the given attribute kind.
pub fn attacker_privacy(
    ckpt: &AttackerCheckpoint,
    records: &[ReprRecord],
    kind: AttrKind,
) -> Result<f64> {
    match kind {
        AttrKind::Demographic => privacy_demographic(&attacker_accuracies(ckpt, records)?),
        AttrKind::Entity => {
            let preds = attacker_predictions(ckpt, records)?;
            let gold: Vec<&[u8]> = records.iter().map(|r| r.z.as_slice()).collect();
            privacy_ner(&preds, &gold, FScoreAveraging::Micro)
        }
    }
}

/// Demographic privacy: 1 - mean per-attribute attacker accuracy.
/// Inputs and output are fractions in [0, 1].
pub fn privacy_demographic(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::InvalidInput("no attribute accuracies".into()));
    }
    if accuracies.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidInput("accuracies must lie in [0,1]".into()));
    }
    Ok(1.0 - accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FScoreAveraging {
    Micro,
    Macro,
}

/// Entity privacy: 1 - F over the binary presence variables, with the
/// positive class = presence and the convention F = 0 when precision and
/// recall are both undefined or zero.
pub fn privacy_ner(
    predictions: &[Vec<u8>],
    gold: &[&[u8]],
    averaging: FScoreAveraging,
) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} gold rows",
            predictions.len(),
            gold.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("no predictions".into()));
    }
    let k = gold[0].len();
    for (p, g) in predictions.iter().zip(gold) {
        if p.len() != k || g.len() != k {
            return Err(Error::shape("ragged prediction/gold rows"));
        }
    }

    let f1 = |tp: f64, fp: f64, fne: f64| -> f64 {
        let denom = 2.0 * tp + fp + fne;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    };

    let f = match averaging {
        FScoreAveraging::Micro => {
            let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
            for (p, g) in predictions.iter().zip(gold) {
                for j in 0..k {
                    match (p[j], g[j]) {
                        (1, 1) => tp += 1.0,
                        (1, 0) => fp += 1.0,
                        (0, 1) => fne += 1.0,
                        _ => {}
                    }
                }
            }
            f1(tp, fp, fne)
        }
        FScoreAveraging::Macro => {
            let mut sum = 0.0;
            for j in 0..k {
                let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
                for (p, g) in predictions.iter().zip(gold) {
                    match (p[j], g[j]) {
                        (1, 1) => tp += 1.0,
                        (1, 0) => fp += 1.0,
                        (0, 1) => fne += 1.0,
                        _ => {}
                    }
                }
                sum += f1(tp, fp, fne);
            }
            sum / k as f64
        }
    };
    Ok(1.0 - f)
}

/// Fraction of examples whose argmax logit matches the gold label,
/// dropout disabled.
pub fn evaluate_accuracy(
    ckpt: &MainCheckpoint,
    corpus: &Corpus,
    split: Split,
) -> Result<f64> {
    let indices = corpus.split_indices(split);
    model_accuracy(&ckpt.model, &ckpt.vocab, corpus, &indices)
}

/// Upper-bound baseline: train encoder + multi-label sigmoid head end to end
/// with z as the supervised target, same architecture and protocol as the
/// main model, and report per-attribute accuracy on the test split.
pub fn trained_upper_bound(
    corpus: &Corpus,
    cfg: &crate::training::TrainConfig,
) -> Result<Vec<f64>> {
    if corpus.k() == 0 {
        return Err(Error::config("corpus declares no private attributes"));
    }
    let train_idx = corpus.split_indices(Split::Train);
    let dev_idx = corpus.split_indices(Split::Dev);
    let test_idx = corpus.split_indices(Split::Test);
    if train_idx.is_empty() || dev_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::InvalidInput("upper bound needs all three splits".into()));
    }

    let vocab = Vocabulary::build(corpus, cfg.setting)?;
    let token_ids: Vec<Vec<usize>> = corpus
        .examples
        .iter()
        .map(|e| vocab.encode_example(e))
        .collect::<Result<_>>()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x55504252); // "UPBR"
    let mut params = Params::new();
    let encoder = crate::nn::Encoder::init(&mut params, &mut init_rng, vocab.n_words(), cfg.d)?;
    let head = Head::init(&mut params, &mut init_rng, "ub", cfg.d, corpus.k())?;
    let mut adam = Adam::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x53485546);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x44524f50);

    let mean_acc = |params: &Params,
                    encoder: &crate::nn::Encoder,
                    head: &Head,
                    idx: &[usize]|
     -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut correct = vec![0usize; corpus.k()];
        for &i in idx {
            let mut tape = Tape::new();
            let bind = tape.bind(params, false);
            let r = lstm_encode(&mut tape, &bind, encoder, &token_ids[i], 0.0, false, &mut rng)?;
            let logits = head_forward(&mut tape, &bind, head, r)?;
            for (j, l) in tape.value(logits).data.iter().enumerate() {
                let pred = (sigmoid_scalar(*l) >= DECISION_THRESHOLD) as u8;
                if pred == corpus.examples[i].private[j] {
                    correct[j] += 1;
                }
            }
        }
        Ok(correct.iter().map(|c| *c as f64 / idx.len() as f64).collect())
    };

    let mut order = train_idx.clone();
    let mut best: Option<(f64, Params)> = None;
    for _epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch) {
            for &i in batch {
                let mut tape = Tape::new();
                let bind = tape.bind(&params, true);
                let r = lstm_encode(
                    &mut tape,
                    &bind,
                    &encoder,
                    &token_ids[i],
                    cfg.dropout,
                    true,
                    &mut dropout_rng,
                )?;
                let logits = head_forward(&mut tape, &bind, &head, r)?;
                let probs = tape.sigmoid(logits);
                let loss = tape.nll_multilabel(probs, &corpus.examples[i].private)?;
                tape.backward(loss, &mut params)?;
            }
            adam.step(&mut params)?;
        }
        let accs = mean_acc(&params, &encoder, &head, &dev_idx)?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let better = match &best {
            None => true,
            Some((m, _)) => mean > *m,
        };
        if better {
            best = Some((mean, params.clone()));
        }
    }
    let (_, params) = best.unwrap();
    mean_acc(&params, &encoder, &head, &test_idx)
}

/// Helper for controls: deterministically permute representations across
/// examples, destroying the r <-> z association while preserving marginals.
pub fn shuffle_representations(records: &[ReprRecord], seed: u64) -> Vec<ReprRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x53485250); // "SHRP"
    let mut perm: Vec<usize> = (0..records.len()).collect();
    perm.shuffle(&mut rng);
    records
        .iter()
        .zip(&perm)
        .map(|(rec, &p)| ReprRecord { r: records[p].r.clone(), z: rec.z.clone() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demographic_privacy_reproduces_reported_baselines() {
        // Most-frequent accuracies (as percentages) -> reported baseline
        // privacy, within rounding.
        let cases = [
            (vec![0.616, 0.584], 0.400), // Denmark
            (vec![0.635, 0.637], 0.364), // US
        ];
        for (accs, want) in cases {
            let got = privacy_demographic(&accs).unwrap();
            assert!((got - want).abs() < 5e-4, "{got} vs {want}");
        }
        assert_eq!(privacy_demographic(&[1.0, 1.0]).unwrap(), 0.0);
        assert!(privacy_demographic(&[]).is_err());
    }

    #[test]
    fn ner_privacy_analytic() {
        // Perfect predictions -> privacy 0.
        let gold_rows = [vec![1u8, 0], vec![0, 1]];
        let gold: Vec<&[u8]> = gold_rows.iter().map(|g| g.as_slice()).collect();
        let p = privacy_ner(&gold_rows, &gold, FScoreAveraging::Micro).unwrap();
        assert_eq!(p, 0.0);

        // TP=2, FP=1, FN=1 -> F = 2/3 -> privacy 1/3.
        let gold_rows = [vec![1u8, 1], vec![1, 0]];
        let gold: Vec<&[u8]> = gold_rows.iter().map(|g| g.as_slice()).collect();
        let preds = vec![vec![1u8, 1], vec![0, 1]];
        let p = privacy_ner(&preds, &gold, FScoreAveraging::Micro).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-12);

        // All-negative predictions with gold positives -> F = 0 -> privacy 1.
        let preds = vec![vec![0u8, 0], vec![0, 0]];
        let p = privacy_ner(&preds, &gold, FScoreAveraging::Micro).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn privacy_is_monotone_in_attacker_performance() {
        let mut prev = f64::INFINITY;
        for acc in [0.5, 0.6, 0.75, 0.9, 1.0] {
            let p = privacy_demographic(&[acc, acc]).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn worst_privacy_selection_prefers_earliest_on_ties() {
        assert_eq!(select_worst_privacy_epoch(&[0.45, 0.40, 0.42]), 2);
        assert_eq!(select_worst_privacy_epoch(&[0.4, 0.4, 0.4]), 1);
        assert_eq!(select_worst_privacy_epoch(&[0.5, 0.3, 0.3]), 2);
    }

    #[test]
    fn attacker_rejects_dimension_mismatch() {
        let train = vec![ReprRecord { r: vec![0.0; 4], z: vec![0, 1] }];
        let dev = vec![ReprRecord { r: vec![0.0; 8], z: vec![0, 1] }];
        assert!(train_attacker(&train, &dev, &AttackConfig::default()).is_err());
    }

    #[test]
    fn attacker_learns_a_linearly_separable_signal() {
        // z_0 is literally the sign of the first coordinate.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng;
        let gen = |rng: &mut ChaCha8Rng, n: usize| -> Vec<ReprRecord> {
            (0..n)
                .map(|_| {
                    let z0 = rng.random_range(0..2) as u8;
                    let r: Vec<f64> = (0..4)
                        .map(|c| {
                            if c == 0 {
                                if z0 == 1 { 1.0 } else { -1.0 }
                            } else {
                                rng.random_range(-1.0..1.0)
                            }
                        })
                        .collect();
                    ReprRecord { r, z: vec![z0] }
                })
                .collect()
        };
        let train_set = gen(&mut rng, 200);
        let dev_set = gen(&mut rng, 50);
        let ckpt = train_attacker(&train_set, &dev_set, &AttackConfig::default()).unwrap();
        let accs = attacker_accuracies(&ckpt, &dev_set).unwrap();
        assert!(accs[0] > 0.95, "attacker accuracy {} on separable data", accs[0]);
    }

    #[test]
    fn shuffled_representations_keep_marginals() {
        let records: Vec<ReprRecord> = (0..10)
            .map(|i| ReprRecord { r: vec![i as f64], z: vec![(i % 2) as u8] })
            .collect();
        let shuffled = shuffle_representations(&records, 3);
        let mut rs: Vec<f64> = shuffled.iter().map(|r| r.r[0]).collect();
        rs.sort_by(f64::total_cmp);
        assert_eq!(rs, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        for (a, b) in records.iter().zip(&shuffled) {
            assert_eq!(a.z, b.z);
        }
    }
}
