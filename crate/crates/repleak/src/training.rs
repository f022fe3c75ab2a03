//! Phase-1 training of the main classifier under four regimes, epoch
//! selection by dev accuracy, and Phase-2 representation export.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, InputSetting, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{charlm_nll, head_forward, lstm_encode, CharLm, Encoder, Head};
use crate::optim::Adam;
use crate::tape::{NodeId, Tape};
use crate::tensor::Params;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Standard,
    Multidetask,
    Advgen,
    Decluster,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Standard => "standard",
            Regime::Multidetask => "multidetask",
            Regime::Advgen => "advgen",
            Regime::Decluster => "decluster",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Regime::Standard),
            "multidetask" => Ok(Regime::Multidetask),
            "advgen" => Ok(Regime::Advgen),
            "decluster" => Ok(Regime::Decluster),
            other => Err(Error::config(format!("unknown regime {other:?}"))),
        }
    }
}

/// Sign convention of the declustering pair term. `AsPrinted` follows the
/// published formula; `Negated` flips it to match the stated intuition of
/// pushing similar-z pairs apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeclusterSign {
    AsPrinted,
    Negated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub regime: Regime,
    pub alpha: f64,
    pub beta: f64,
    pub setting: InputSetting,
    pub dropout: f64,
    pub decluster_sign: DeclusterSign,
    /// Documents are truncated to this many characters for the generator.
    pub max_chars: usize,
}

impl TrainConfig {
    pub fn new(regime: Regime) -> Self {
        TrainConfig {
            d: 32,
            epochs: 8,
            batch: 16,
            seed: 0,
            regime,
            alpha: if regime == Regime::Decluster { 0.1 } else { 1.0 },
            beta: 1.0,
            setting: InputSetting::Raw,
            dropout: 0.2,
            decluster_sign: DeclusterSign::AsPrinted,
            max_chars: 256,
        }
    }

    fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::config("alpha must be positive"));
        }
        match self.regime {
            Regime::Standard => {}
            Regime::Multidetask | Regime::Advgen => {
                if self.beta <= 0.0 {
                    return Err(Error::config(
                        "beta must be positive for adversarial regimes",
                    ));
                }
            }
            Regime::Decluster => {}
        }
        if matches!(self.regime, Regime::Multidetask | Regime::Decluster) && corpus.k() == 0 {
            return Err(Error::config(format!(
                "regime {} requires private attributes (K >= 1)",
                self.regime
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MainModel {
    pub params: Params,
    pub encoder: Encoder,
    pub head: Head,
}

impl MainModel {
    pub fn init(
        rng: &mut ChaCha8Rng,
        vocab_words: usize,
        d: usize,
        n_classes: usize,
    ) -> Result<MainModel> {
        let mut params = Params::new();
        let encoder = Encoder::init(&mut params, rng, vocab_words, d)?;
        let head = Head::init(&mut params, rng, "main", d, n_classes)?;
        Ok(MainModel { params, encoder, head })
    }
}

/// Self-describing container for a trained main model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MainCheckpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub n_classes: usize,
    pub vocab: Vocabulary,
    pub model: MainModel,
    pub dev_accuracy: f64,
    /// 1-based index of the selected epoch.
    pub epoch: usize,
    /// Mean training loss per epoch.
    pub epoch_train_loss: Vec<f64>,
    /// Dev accuracy per epoch.
    pub epoch_dev_accuracy: Vec<f64>,
    /// Optimizer state at the end of training, for deterministic resume.
    pub adam: Adam,
}

/// Main-model selection rule: argmax of dev accuracy, ties broken toward
/// the earlier epoch. Returns a 1-based epoch index.
pub fn select_best_epoch(dev_accuracies: &[f64]) -> usize {
    let mut best = 0;
    for (i, a) in dev_accuracies.iter().enumerate() {
        if *a > dev_accuracies[best] {
            best = i;
        }
    }
    best + 1
}

impl MainCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MainCheckpoint> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut ckpt: MainCheckpoint = serde_json::from_reader(f)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.vocab.reindex();
        Ok(ckpt)
    }
}

/// One Phase-2 row: the frozen representation and its private attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprRecord {
    pub r: Vec<f64>,
    pub z: Vec<u8>,
}

/// Normalized Hamming distance: fraction of differing coordinates.
pub fn hamming_normalized(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "hamming distance of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty attribute vectors".into()));
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.len() as f64)
}

// RNG domain separators: one independent stream per concern.
const DOM_INIT: u64 = 0x494e4954; // "INIT"
const DOM_AUX: u64 = 0x41555821; // "AUX!"
const DOM_SHUFFLE: u64 = 0x53485546; // "SHUF"
const DOM_DROPOUT: u64 = 0x44524f50; // "DROP"
const DOM_PARTNER: u64 = 0x50415254; // "PART"

fn stream(seed: u64, domain: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ domain)
}

/// Auxiliary network trained in alternation with the main model.
enum Aux {
    None,
    Adversary { params: Params, head: Head, adam: Adam },
    Generator { params: Params, lm: CharLm, adam: Adam },
}

/// Train the main classifier under `cfg.regime`. Runs the configured number
/// of epochs of minibatch Adam, alternating one auxiliary step with one main
/// step per minibatch in the adversarial regimes, and returns the epoch
/// snapshot with the best dev accuracy (ties broken toward earlier epochs).
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<MainCheckpoint> {
    cfg.validate(corpus)?;
    let train_idx = corpus.split_indices(Split::Train);
    let dev_idx = corpus.split_indices(Split::Dev);
    if train_idx.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    if dev_idx.is_empty() {
        return Err(Error::InvalidInput("empty dev split".into()));
    }
    if cfg.regime == Regime::Decluster && train_idx.len() < 2 {
        return Err(Error::config(
            "declustering needs at least 2 training examples to sample a partner",
        ));
    }

    let vocab = Vocabulary::build(corpus, cfg.setting)?;
    let token_ids: Vec<Vec<usize>> = corpus
        .examples
        .iter()
        .map(|e| vocab.encode_example(e))
        .collect::<Result<_>>()?;
    for (i, ids) in token_ids.iter().enumerate() {
        if ids.is_empty() {
            return Err(Error::InvalidInput(format!("example {i} has no tokens")));
        }
    }
    let char_ids: Vec<Vec<usize>> = if cfg.regime == Regime::Advgen {
        corpus
            .examples
            .iter()
            .map(|e| {
                let mut c = vocab.char_ids(&e.text);
                c.truncate(cfg.max_chars);
                c
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut init_rng = stream(cfg.seed, DOM_INIT);
    let mut model = MainModel::init(&mut init_rng, vocab.n_words(), cfg.d, corpus.labels.len())?;
    let mut adam = Adam::new(&model.params);

    let mut aux_rng = stream(cfg.seed, DOM_AUX);
    let mut aux = match cfg.regime {
        Regime::Multidetask => {
            let mut params = Params::new();
            let head = Head::init(&mut params, &mut aux_rng, "adv", cfg.d, corpus.k())?;
            let adam = Adam::new(&params);
            Aux::Adversary { params, head, adam }
        }
        Regime::Advgen => {
            let mut params = Params::new();
            let lm = CharLm::init(&mut params, &mut aux_rng, vocab.n_chars(), cfg.d)?;
            let adam = Adam::new(&params);
            Aux::Generator { params, lm, adam }
        }
        _ => Aux::None,
    };

    let mut shuffle_rng = stream(cfg.seed, DOM_SHUFFLE);
    let mut dropout_rng = stream(cfg.seed, DOM_DROPOUT);
    let mut partner_rng = stream(cfg.seed, DOM_PARTNER);

    let mut order = train_idx.clone();
    let mut best: Option<(f64, usize, Params)> = None;
    let mut epoch_train_loss = Vec::with_capacity(cfg.epochs);
    let mut epoch_dev_accuracy = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        // Declustering partners are resampled once per epoch.
        let partners: Vec<usize> = if cfg.regime == Regime::Decluster {
            order
                .iter()
                .map(|&i| loop {
                    let p = train_idx[partner_rng.random_range(0..train_idx.len())];
                    if p != i {
                        break p;
                    }
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            // Auxiliary step first: adversary/generator learns against the
            // current representations, which it cannot influence.
            match &mut aux {
                Aux::None => {}
                Aux::Adversary { params, head, adam } => {
                    for &i in batch {
                        let mut tape = Tape::new();
                        let model_bind = tape.bind(&model.params, false);
                        let r = lstm_encode(
                            &mut tape,
                            &model_bind,
                            &model.encoder,
                            &token_ids[i],
                            cfg.dropout,
                            true,
                            &mut dropout_rng,
                        )?;
                        let adv_bind = tape.bind(params, true);
                        let logits = head_forward(&mut tape, &adv_bind, head, r)?;
                        let probs = tape.sigmoid(logits);
                        let loss =
                            tape.nll_multilabel(probs, &corpus.examples[i].private)?;
                        tape.backward(loss, params)?;
                    }
                    adam.step(params)?;
                }
                Aux::Generator { params, lm, adam } => {
                    for &i in batch {
                        if char_ids[i].is_empty() {
                            continue;
                        }
                        let mut tape = Tape::new();
                        let model_bind = tape.bind(&model.params, false);
                        let r = lstm_encode(
                            &mut tape,
                            &model_bind,
                            &model.encoder,
                            &token_ids[i],
                            cfg.dropout,
                            true,
                            &mut dropout_rng,
                        )?;
                        let gen_bind = tape.bind(params, true);
                        let loss = charlm_nll(
                            &mut tape,
                            &gen_bind,
                            lm,
                            &char_ids[i],
                            vocab.bos_char(),
                            r,
                        )?;
                        tape.backward(loss, params)?;
                    }
                    adam.step(params)?;
                }
            }

            // Main step: theta_r and theta_p only; the auxiliary network is
            // bound frozen so its parameters receive no gradient.
            for (k, &i) in batch.iter().enumerate() {
                let mut tape = Tape::new();
                let bind = tape.bind(&model.params, true);
                let r = lstm_encode(
                    &mut tape,
                    &bind,
                    &model.encoder,
                    &token_ids[i],
                    cfg.dropout,
                    true,
                    &mut dropout_rng,
                )?;
                let logits = head_forward(&mut tape, &bind, &model.head, r)?;
                let nll = tape.nll_categorical(logits, corpus.examples[i].label)?;
                let loss = match (&aux, cfg.regime) {
                    (Aux::None, Regime::Standard) => {
                        if cfg.alpha == 1.0 {
                            nll
                        } else {
                            tape.scale(nll, cfg.alpha)
                        }
                    }
                    (Aux::Adversary { params, head, .. }, Regime::Multidetask) => {
                        let adv_bind = tape.bind(params, false);
                        let adv_logits = head_forward(&mut tape, &adv_bind, head, r)?;
                        let probs = tape.sigmoid(adv_logits);
                        let not_z: Vec<u8> = corpus.examples[i]
                            .private
                            .iter()
                            .map(|z| 1 - z)
                            .collect();
                        let deceive = tape.nll_multilabel(probs, &not_z)?;
                        let a = tape.scale(nll, cfg.alpha);
                        let b = tape.scale(deceive, cfg.beta);
                        tape.add(a, b)?
                    }
                    (Aux::Generator { params, lm, .. }, Regime::Advgen) => {
                        if char_ids[i].is_empty() {
                            tape.scale(nll, cfg.alpha)
                        } else {
                            let gen_bind = tape.bind(params, false);
                            let lg = charlm_nll(
                                &mut tape,
                                &gen_bind,
                                lm,
                                &char_ids[i],
                                vocab.bos_char(),
                                r,
                            )?;
                            let a = tape.scale(nll, cfg.alpha);
                            let b = tape.scale(lg, -cfg.beta);
                            tape.add(a, b)?
                        }
                    }
                    (Aux::None, Regime::Decluster) => {
                        let batch_start = b * cfg.batch;
                        let partner = partners[batch_start + k];
                        let r2 = lstm_encode(
                            &mut tape,
                            &bind,
                            &model.encoder,
                            &token_ids[partner],
                            cfg.dropout,
                            true,
                            &mut dropout_rng,
                        )?;
                        let pair = decluster_pair_term(
                            &mut tape,
                            r,
                            r2,
                            &corpus.examples[i].private,
                            &corpus.examples[partner].private,
                            cfg.alpha,
                            cfg.decluster_sign,
                        )?;
                        tape.add(nll, pair)?
                    }
                    _ => unreachable!("aux network matches regime"),
                };
                epoch_loss += tape.value(loss).item();
                tape.backward(loss, &mut model.params)?;
            }
            adam.step(&mut model.params)?;
        }
        epoch_train_loss.push(epoch_loss / train_idx.len() as f64);

        let dev_acc = model_accuracy(&model, &vocab, corpus, &dev_idx)?;
        epoch_dev_accuracy.push(dev_acc);
        let better = match &best {
            None => true,
            Some((acc, _, _)) => dev_acc > *acc,
        };
        if better {
            best = Some((dev_acc, epoch, model.params.clone()));
        }
    }

    let (dev_accuracy, epoch, params) = best.unwrap();
    debug_assert_eq!(epoch, select_best_epoch(&epoch_dev_accuracy));
    let model = MainModel { params, encoder: model.encoder, head: model.head };
    Ok(MainCheckpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        n_classes: corpus.labels.len(),
        vocab,
        model,
        dev_accuracy,
        epoch,
        epoch_train_loss,
        epoch_dev_accuracy,
        adam,
    })
}

/// `alpha * (0.5 - hamming(z, z')) * ||r - r'||^2`, as printed, or its
/// negation under the `Negated` sign convention.
pub fn decluster_pair_term(
    tape: &mut Tape,
    r: NodeId,
    r_partner: NodeId,
    z: &[u8],
    z_partner: &[u8],
    alpha: f64,
    sign: DeclusterSign,
) -> Result<NodeId> {
    let ell = hamming_normalized(z, z_partner)?;
    let mut coeff = alpha * (0.5 - ell);
    if sign == DeclusterSign::Negated {
        coeff = -coeff;
    }
    let diff = tape.sub(r, r_partner)?;
    let dist2 = tape.sum_squares(diff);
    Ok(tape.scale(dist2, coeff))
}

/// Accuracy of a live model on the given example indices, dropout disabled.
pub(crate) fn model_accuracy(
    model: &MainModel,
    vocab: &Vocabulary,
    corpus: &Corpus,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty evaluation split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: dropout disabled
    let mut correct = 0usize;
    for &i in indices {
        let ids = vocab.encode_example(&corpus.examples[i])?;
        let mut tape = Tape::new();
        let bind = tape.bind(&model.params, false);
        let r = lstm_encode(&mut tape, &bind, &model.encoder, &ids, 0.0, false, &mut rng)?;
        let logits = head_forward(&mut tape, &bind, &model.head, r)?;
        if argmax(&tape.value(logits).data) == corpus.examples[i].label {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Compute the frozen representation of a single encoded example.
pub(crate) fn encode_representation(
    model: &MainModel,
    ids: &[usize],
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let bind = tape.bind(&model.params, false);
    let r = lstm_encode(&mut tape, &bind, &model.encoder, ids, 0.0, false, &mut rng)?;
    Ok(tape.value(r).data.clone())
}

/// Phase 2: one (r(x), z) record per example of the split, in corpus order,
/// with dropout disabled regardless of the training configuration.
pub fn export_representations(
    ckpt: &MainCheckpoint,
    corpus: &Corpus,
    split: Split,
) -> Result<Vec<ReprRecord>> {
    if ckpt.vocab.attr_names != corpus.attr_names {
        return Err(Error::config(format!(
            "checkpoint was trained with attributes {:?}, corpus declares {:?}",
            ckpt.vocab.attr_names, corpus.attr_names
        )));
    }
    let mut records = Vec::new();
    for &i in &corpus.split_indices(split) {
        let ids = ckpt.vocab.encode_example(&corpus.examples[i])?;
        let r = encode_representation(&ckpt.model, &ids)?;
        records.push(ReprRecord { r, z: corpus.examples[i].private.clone() });
    }
    Ok(records)
}

/// Write a representation dataset: a header line with d, K and attribute
/// names, then one record per line (d floats, K bits, space separated).
pub fn write_repr_file(
    path: impl AsRef<Path>,
    d: usize,
    attr_names: &[String],
    records: &[ReprRecord],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "repr-v1 d={} k={} attrs={}", d, attr_names.len(), attr_names.join(","))?;
    for rec in records {
        let mut line = String::new();
        for v in &rec.r {
            line.push_str(&format!("{v} "));
        }
        for z in &rec.z {
            line.push_str(&format!("{z} "));
        }
        writeln!(f, "{}", line.trim_end())?;
    }
    Ok(())
}

pub fn read_repr_file(path: impl AsRef<Path>) -> Result<(usize, Vec<String>, Vec<ReprRecord>)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty representation file".into() })?;
    let header = header?;
    let mut d = None;
    let mut k = None;
    let mut attrs = Vec::new();
    for part in header.split_whitespace() {
        if let Some(v) = part.strip_prefix("d=") {
            d = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("k=") {
            k = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("attrs=") {
            attrs = v.split(',').map(str::to_string).collect();
        }
    }
    let (d, k): (usize, usize) = match (d, k) {
        (Some(d), Some(k)) => (d, k),
        _ => {
            return Err(Error::Parse { line: 1, msg: format!("bad header {header:?}") });
        }
    };
    let mut records = Vec::new();
    for (lineno, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != d + k {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected {} fields, found {}", d + k, fields.len()),
            });
        }
        let r = fields[..d]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
        let z = fields[d..]
            .iter()
            .map(|s| s.parse::<u8>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
        records.push(ReprRecord { r, z });
    }
    Ok((d, attrs, records))
}
