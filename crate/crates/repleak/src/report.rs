//! Privacy/utility reports: a flat key=value file per run plus an aligned
//! summary table across runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AttrKind;
use crate::error::{Error, Result};
use crate::training::Regime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub regime: Regime,
    pub d: usize,
    pub seed: u64,
    pub setting: String,
    pub attr_kind: AttrKind,
    pub attr_names: Vec<String>,
    /// Main-task accuracy on the test split.
    pub main_accuracy: f64,
    /// Per-attribute attacker accuracy on the test split.
    pub attacker_accuracies: Vec<f64>,
    /// Micro F1 of the attacker (entity mode only).
    pub attacker_f1: Option<f64>,
    /// Privacy score in [0, 1] under the corpus's attribute kind.
    pub privacy: f64,
    /// Most-frequent baseline accuracy for the main label.
    pub baseline_main_accuracy: f64,
    /// Most-frequent baseline accuracy per attribute.
    pub baseline_accuracies: Vec<f64>,
    /// Privacy of the most-frequent baseline attacker.
    pub baseline_privacy: f64,
    /// Trained upper-bound accuracies per attribute, when requested.
    pub upper_bound_accuracies: Option<Vec<f64>>,
}

impl PrivacyReport {
    /// Flat key=value serialization, one key per line, deterministic order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("regime", self.regime.to_string());
        kv("d", self.d.to_string());
        kv("seed", self.seed.to_string());
        kv("setting", self.setting.clone());
        kv(
            "attr_kind",
            match self.attr_kind {
                AttrKind::Demographic => "demographic".into(),
                AttrKind::Entity => "entity".into(),
            },
        );
        kv("attrs", self.attr_names.join(","));
        kv("main_accuracy", format!("{}", self.main_accuracy));
        for (name, acc) in self.attr_names.iter().zip(&self.attacker_accuracies) {
            kv(&format!("attacker_accuracy.{name}"), format!("{acc}"));
        }
        if let Some(f1) = self.attacker_f1 {
            kv("attacker_f1", format!("{f1}"));
        }
        kv("privacy", format!("{}", self.privacy));
        kv("baseline_main_accuracy", format!("{}", self.baseline_main_accuracy));
        for (name, acc) in self.attr_names.iter().zip(&self.baseline_accuracies) {
            kv(&format!("baseline_accuracy.{name}"), format!("{acc}"));
        }
        kv("baseline_privacy", format!("{}", self.baseline_privacy));
        if let Some(ub) = &self.upper_bound_accuracies {
            for (name, acc) in self.attr_names.iter().zip(ub) {
                kv(&format!("upper_bound_accuracy.{name}"), format!("{acc}"));
            }
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_kv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PrivacyReport> {
        let text = std::fs::read_to_string(path.as_ref())?;
        PrivacyReport::from_kv(&text)
    }

    pub fn from_kv(text: &str) -> Result<PrivacyReport> {
        let mut map = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("report is missing key {k:?}")))
        };
        let parse_f = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|e| Error::Schema(format!("bad value for {k}: {e}")))
        };
        let attr_names: Vec<String> =
            get("attrs")?.split(',').map(str::to_string).collect();
        let per_attr = |prefix: &str| -> Result<Vec<f64>> {
            attr_names
                .iter()
                .map(|n| parse_f(&format!("{prefix}.{n}")))
                .collect()
        };
        let upper = if map.keys().any(|k| k.starts_with("upper_bound_accuracy.")) {
            Some(per_attr("upper_bound_accuracy")?)
        } else {
            None
        };
        Ok(PrivacyReport {
            regime: get("regime")?.parse()?,
            d: get("d")?
                .parse()
                .map_err(|e| Error::Schema(format!("bad d: {e}")))?,
            seed: get("seed")?
                .parse()
                .map_err(|e| Error::Schema(format!("bad seed: {e}")))?,
            setting: get("setting")?,
            attr_kind: match get("attr_kind")?.as_str() {
                "demographic" => AttrKind::Demographic,
                "entity" => AttrKind::Entity,
                other => return Err(Error::Schema(format!("bad attr_kind {other:?}"))),
            },
            attacker_accuracies: per_attr("attacker_accuracy")?,
            attacker_f1: map.get("attacker_f1").map(|v| v.parse()).transpose().map_err(
                |e| Error::Schema(format!("bad attacker_f1: {e}")),
            )?,
            main_accuracy: parse_f("main_accuracy")?,
            privacy: parse_f("privacy")?,
            baseline_main_accuracy: parse_f("baseline_main_accuracy")?,
            baseline_accuracies: per_attr("baseline_accuracy")?,
            baseline_privacy: parse_f("baseline_privacy")?,
            upper_bound_accuracies: upper,
            attr_names,
        })
    }
}

/// Render a summary table across runs: Main / Priv. columns (percentages),
/// with absolute deltas against the standard regime of the same (d, seed),
/// plus a baseline row.
pub fn render_table(reports: &[PrivacyReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>4} {:>5}  {:>6} {:>6}  {:>7} {:>7}",
        "regime", "d", "seed", "Main", "Priv.", "dMain", "dPriv"
    );
    let pct = |v: f64| v * 100.0;
    let std_of = |d: usize, seed: u64| -> Option<&PrivacyReport> {
        reports
            .iter()
            .find(|r| r.regime == Regime::Standard && r.d == d && r.seed == seed)
    };
    let mut sorted: Vec<&PrivacyReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.regime.to_string(), r.d, r.seed));
    for r in sorted {
        let (dmain, dpriv) = match std_of(r.d, r.seed) {
            Some(s) => (
                format_delta(pct(r.main_accuracy) - pct(s.main_accuracy)),
                format_delta(pct(r.privacy) - pct(s.privacy)),
            ),
            None => ("-".to_string(), "-".to_string()),
        };
        let _ = writeln!(
            out,
            "{:<12} {:>4} {:>5}  {:>6.1} {:>6.1}  {:>7} {:>7}",
            r.regime.to_string(),
            r.d,
            r.seed,
            pct(r.main_accuracy),
            pct(r.privacy),
            dmain,
            dpriv
        );
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(
            out,
            "{:<12} {:>4} {:>5}  {:>6.1} {:>6.1}  {:>7} {:>7}",
            "baseline",
            "-",
            "-",
            pct(r.baseline_main_accuracy),
            pct(r.baseline_privacy),
            "-",
            "-"
        );
    }
    out
}

fn format_delta(v: f64) -> String {
    if v >= 0.0 {
        format!("+{v:.1}")
    } else {
        format!("\u{2212}{:.1}", -v)
    }
}
