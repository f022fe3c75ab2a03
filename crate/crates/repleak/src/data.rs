//! Corpus loading, vocabulary construction, input encoding, and the
//! synthetic-corpus generator.
//!
//! The wire format is JSON Lines: one object per example with fields
//! `text` (string), `label` (string), `private` (map name -> 0/1) and an
//! optional `split` in {train, dev, test}. Examples without split fields
//! get a seeded 80/10/10 split at load time.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Which privacy metric applies to a corpus's private attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    /// Demographic variables: privacy = 1 - mean attacker accuracy.
    Demographic,
    /// Entity-presence flags: privacy = 1 - micro F1.
    Entity,
}

/// Input setting: raw text, or text with demographic marker tokens prepended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSetting {
    Raw,
    Demo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub tokens: Vec<String>,
    pub label: usize,
    pub private: Vec<u8>,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub labels: Vec<String>,
    pub attr_names: Vec<String>,
    pub attr_kind: AttrKind,
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    label: String,
    private: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    split: Option<String>,
}

impl Corpus {
    pub fn k(&self) -> usize {
        self.attr_names.len()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
        Corpus::load_jsonl_seeded(path, 0)
    }

    /// `seed` drives the 80/10/10 split when records carry no split field.
    pub fn load_jsonl_seeded(path: impl AsRef<Path>, seed: u64) -> Result<Corpus> {
        let file = std::fs::File::open(path.as_ref())?;
        let reader = std::io::BufReader::new(file);

        let mut labels: Vec<String> = Vec::new();
        let mut attr_names: Vec<String> = Vec::new();
        let mut examples = Vec::new();
        let mut splits: Vec<Option<Split>> = Vec::new();

        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let n = lineno + 1;
            let rec: RawRecord = serde_json::from_str(&line).map_err(|e| {
                let msg = if e.to_string().contains("missing field") {
                    format!("schema error: {e}")
                } else {
                    e.to_string()
                };
                Error::Parse { line: n, msg }
            })?;

            if examples.is_empty() {
                attr_names = rec.private.keys().cloned().collect();
            } else {
                let keys: Vec<String> = rec.private.keys().cloned().collect();
                if keys != attr_names {
                    return Err(Error::Schema(format!(
                        "line {n}: private keys {keys:?} differ from first record's {attr_names:?}"
                    )));
                }
            }
            let mut z = Vec::with_capacity(attr_names.len());
            for name in &attr_names {
                let v = rec.private.get(name).unwrap();
                match v.as_u64() {
                    Some(0) => z.push(0),
                    Some(1) => z.push(1),
                    _ => {
                        return Err(Error::Schema(format!(
                            "line {n}: private attribute {name:?} must be 0 or 1, got {v}"
                        )))
                    }
                }
            }
            let label = match labels.iter().position(|l| *l == rec.label) {
                Some(i) => i,
                None => {
                    labels.push(rec.label.clone());
                    labels.len() - 1
                }
            };
            let split = match rec.split.as_deref() {
                None => None,
                Some("train") => Some(Split::Train),
                Some("dev") => Some(Split::Dev),
                Some("test") => Some(Split::Test),
                Some(other) => {
                    return Err(Error::Schema(format!(
                        "line {n}: unknown split {other:?}"
                    )))
                }
            };
            splits.push(split);
            examples.push(Example {
                tokens: tokenize(&rec.text),
                text: rec.text,
                label,
                private: z,
                split: Split::Train, // assigned below
            });
        }
        if examples.is_empty() {
            return Err(Error::Schema("corpus is empty".into()));
        }

        let assigned = splits.iter().filter(|s| s.is_some()).count();
        if assigned == splits.len() {
            for (e, s) in examples.iter_mut().zip(&splits) {
                e.split = s.unwrap();
            }
        } else if assigned == 0 {
            assign_splits(&mut examples, seed);
        } else {
            return Err(Error::Schema(
                "mixed split annotations: either all records or none must carry a split field"
                    .into(),
            ));
        }

        Ok(Corpus { examples, labels, attr_names, attr_kind: AttrKind::Demographic })
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        for e in &self.examples {
            let mut private = serde_json::Map::new();
            for (name, v) in self.attr_names.iter().zip(&e.private) {
                private.insert(name.clone(), serde_json::json!(v));
            }
            let obj = serde_json::json!({
                "text": e.text,
                "label": self.labels[e.label],
                "private": private,
                "split": e.split.to_string(),
            });
            writeln!(file, "{}", serde_json::to_string(&obj)?)?;
        }
        Ok(())
    }
}

/// Seeded disjoint 80/10/10 split covering all examples.
fn assign_splits(examples: &mut [Example], seed: u64) {
    // Domain separator so split assignment never shares a stream with
    // corpus generation under the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x53504c4954); // "SPLIT"
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut rng);
    let n = examples.len();
    let n_train = (n * 8) / 10;
    let n_dev = n / 10;
    for (pos, &i) in idx.iter().enumerate() {
        examples[i].split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
    }
}

/// Bin a raw numeric attribute against (low, high) thresholds.
/// Below `low` -> 0, above `high` -> 1, inside the gap -> discard (None).
pub fn bin_attribute(
    value: &serde_json::Value,
    low: f64,
    high: f64,
) -> Result<Option<u8>> {
    let v = value
        .as_f64()
        .ok_or_else(|| Error::Schema(format!("non-numeric attribute value {value}")))?;
    Ok(if v < low {
        Some(0)
    } else if v > high {
        Some(1)
    } else {
        None
    })
}

/// Reserved vocabulary entries.
pub const UNK: usize = 0;
pub const BOS_CHAR: &str = "<bos>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
    pub chars: Vec<String>,
    pub setting: InputSetting,
    pub attr_names: Vec<String>,
    #[serde(skip)]
    word_index: HashMap<String, usize>,
    #[serde(skip)]
    char_index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Built from the training split only. Words below frequency 2 map to
    /// UNK. In the `+demo` setting one marker token per (attribute, value)
    /// pair is added as an ordinary vocabulary entry.
    pub fn build(corpus: &Corpus, setting: InputSetting) -> Result<Vocabulary> {
        if setting == InputSetting::Demo && corpus.k() == 0 {
            return Err(Error::config(
                "+demo setting requires a corpus with demographic attributes",
            ));
        }
        let mut word_counts: HashMap<&str, usize> = HashMap::new();
        let mut char_set: Vec<String> = Vec::new();
        let mut seen_chars: HashMap<String, ()> = HashMap::new();
        for e in corpus.examples.iter().filter(|e| e.split == Split::Train) {
            for t in &e.tokens {
                *word_counts.entry(t).or_insert(0) += 1;
            }
            for ch in e.text.chars() {
                let s = ch.to_string();
                if seen_chars.insert(s.clone(), ()).is_none() {
                    char_set.push(s);
                }
            }
        }
        char_set.sort();

        let mut words = vec!["<unk>".to_string()];
        if setting == InputSetting::Demo {
            for name in &corpus.attr_names {
                for v in 0..2 {
                    words.push(marker_token(name, v));
                }
            }
        }
        let mut kept: Vec<String> = word_counts
            .into_iter()
            .filter(|(_, c)| *c >= 2)
            .map(|(w, _)| w.to_string())
            .collect();
        kept.sort();
        words.extend(kept);

        let mut chars = vec!["<unk>".to_string(), BOS_CHAR.to_string()];
        chars.extend(char_set);

        let mut vocab = Vocabulary {
            words,
            chars,
            setting,
            attr_names: corpus.attr_names.clone(),
            word_index: HashMap::new(),
            char_index: HashMap::new(),
        };
        vocab.reindex();
        Ok(vocab)
    }

    pub fn reindex(&mut self) {
        self.word_index =
            self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        self.char_index =
            self.chars.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn bos_char(&self) -> usize {
        1
    }

    pub fn word_id(&self, w: &str) -> usize {
        *self.word_index.get(w).unwrap_or(&UNK)
    }

    pub fn char_ids(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| *self.char_index.get(&c.to_string()).unwrap_or(&UNK))
            .collect()
    }

    /// Token ids for an example under this vocabulary's input setting.
    /// `+demo` prepends one marker token per private attribute.
    pub fn encode_example(&self, example: &Example) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        if self.setting == InputSetting::Demo {
            if example.private.len() != self.attr_names.len() {
                return Err(Error::config(format!(
                    "+demo encoding expects {} attributes, example has {}",
                    self.attr_names.len(),
                    example.private.len()
                )));
            }
            for (name, v) in self.attr_names.iter().zip(&example.private) {
                ids.push(self.word_id(&marker_token(name, *v)));
            }
        }
        ids.extend(example.tokens.iter().map(|t| self.word_id(t)));
        Ok(ids)
    }
}

pub fn marker_token(attr: &str, value: u8) -> String {
    format!("<{attr}={value}>")
}

/// Configuration of the synthetic-corpus generator. Every key maps 1:1 to a
/// key of the flat key=value config file consumed by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub classes: usize,
    pub k: usize,
    pub n: usize,
    pub label_signal: f64,
    pub private_signal: f64,
    pub rho: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 100,
            classes: 2,
            k: 2,
            n: 1000,
            label_signal: 0.9,
            private_signal: 0.6,
            rho: 0.3,
            seed: 0,
        }
    }
}

/// Generate a corpus with plantable label and private-attribute signal.
///
/// Each example mixes noise tokens, class-marker tokens (inserted with
/// probability `label_signal`, twice) and per-attribute private-marker
/// tokens (inserted with probability `private_signal`). Each z_j agrees
/// with the parity of the class label with probability (1 + rho)/2, which
/// gives corr(z_j, parity(y)) = rho on balanced classes.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if cfg.k == 0 {
        return Err(Error::config("need at least 1 private attribute"));
    }
    if !(0.0..=1.0).contains(&cfg.label_signal) || !(0.0..=1.0).contains(&cfg.private_signal) {
        return Err(Error::config("signal strengths must lie in [0,1]"));
    }
    if !(-1.0..=1.0).contains(&cfg.rho) {
        return Err(Error::config("rho must lie in [-1,1]"));
    }
    if cfg.rho != 0.0 && !cfg.classes.is_multiple_of(2) {
        return Err(Error::config(
            "rho != 0 requires an even class count (z is tied to label parity, \
             which is unbalanced for odd class counts)",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut examples = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let y = rng.random_range(0..cfg.classes);
        let parity = (y % 2) as u8;
        let z: Vec<u8> = (0..cfg.k)
            .map(|_| {
                if rng.random::<f64>() < (1.0 + cfg.rho) / 2.0 {
                    parity
                } else {
                    1 - parity
                }
            })
            .collect();

        let len = 4 + rng.random_range(0..3);
        let mut tokens: Vec<String> =
            (0..len).map(|_| format!("w{}", rng.random_range(0..cfg.vocab_size))).collect();
        // The class signal is compositional: y = (a + b) mod classes, carried
        // by a pair of marker tokens. Recovering it forces the encoder to
        // combine evidence across positions instead of spotting one token,
        // which keeps main-task learning progressing over many epochs.
        let a = rng.random_range(0..cfg.classes);
        let b = (y + cfg.classes - a) % cfg.classes;
        for (tag, v) in [("la", a), ("lb", b)] {
            if rng.random::<f64>() < cfg.label_signal {
                let pos = rng.random_range(0..=tokens.len());
                tokens.insert(pos, format!("{tag}{v}"));
            }
        }
        for (j, zj) in z.iter().enumerate() {
            if rng.random::<f64>() < cfg.private_signal {
                // Private markers sit in the back half of the document, the
                // region a recurrent encoder retains most strongly; leakage
                // under standard training is the phenomenon under study.
                let pos = rng.random_range(tokens.len() / 2..=tokens.len());
                tokens.insert(pos, format!("z{j}v{zj}"));
            }
        }
        let text = tokens.join(" ");
        examples.push(Example {
            tokens,
            text,
            label: y,
            private: z,
            split: Split::Train,
        });
    }
    assign_splits(&mut examples, cfg.seed);

    Ok(Corpus {
        examples,
        labels: (0..cfg.classes).map(|c| format!("c{c}")).collect(),
        attr_names: (0..cfg.k).map(|j| format!("attr{j}")).collect(),
        attr_kind: AttrKind::Demographic,
    })
}

/// Target of the most-frequent baseline.
#[derive(Debug, Clone, Copy)]
pub enum BaselineTarget {
    MainLabel,
    Private(usize),
}

/// Majority value on the training split, accuracy on `eval_split`.
/// Ties break toward the lower id/value.
pub fn most_frequent_baseline(
    corpus: &Corpus,
    target: BaselineTarget,
    eval_split: Split,
) -> Result<(usize, f64)> {
    let value_of = |e: &Example| -> usize {
        match target {
            BaselineTarget::MainLabel => e.label,
            BaselineTarget::Private(j) => e.private[j] as usize,
        }
    };
    let train: Vec<usize> = corpus
        .examples
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(value_of)
        .collect();
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let max_v = *train.iter().max().unwrap();
    let mut counts = vec![0usize; max_v + 1];
    for v in &train {
        counts[*v] += 1;
    }
    let majority = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
        .unwrap();

    let eval: Vec<usize> = corpus
        .examples
        .iter()
        .filter(|e| e.split == eval_split)
        .map(value_of)
        .collect();
    if eval.is_empty() {
        return Err(Error::InvalidInput(format!("empty {eval_split} split")));
    }
    let correct = eval.iter().filter(|v| **v == majority).count();
    Ok((majority, correct as f64 / eval.len() as f64))
}
