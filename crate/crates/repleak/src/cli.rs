//! Command-line front end: `synth`, `train`, `attack`, `grid`, `report`.
//!
//! Flags beat config-file values; config files are flat key=value.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::attack::{attacker_accuracies, train_attacker, AttackConfig};
use crate::config::KvConfig;
use crate::data::{
    most_frequent_baseline, synth_generate, AttrKind, BaselineTarget, Corpus, InputSetting,
    Split, SynthConfig,
};
use crate::error::{Error, Result};
use crate::report::{render_table, PrivacyReport};
use crate::training::{
    export_representations, read_repr_file, train, write_repr_file, MainCheckpoint, Regime,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "repleak", about = "Privacy/utility evaluation of text-classifier representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic JSONL corpus with plantable private signal.
    Synth(SynthArgs),
    /// Phase 1: train the main classifier, optionally under a defense.
    Train(TrainArgs),
    /// Phases 2-3: export representations, train the attacker, report.
    Attack(AttackArgs),
    /// Run train+attack over a (regime, d, seed) grid.
    Grid(GridArgs),
    /// Re-render the summary table of a finished (or partial) grid.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub label_signal: Option<f64>,
    #[arg(long)]
    pub private_signal: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Args, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = parse_setting)]
    pub setting: Option<InputSetting>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Clone)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Privacy metric: demo (1 - mean accuracy) or ner (1 - micro F1).
    #[arg(long, default_value = "demo", value_parser = parse_metric)]
    pub metric: AttrKind,
    /// Control: permute representations across examples before the attack.
    #[arg(long)]
    pub shuffle_reprs: bool,
    /// Also train the z-supervised upper-bound baseline.
    #[arg(long)]
    pub upper_bound: bool,
    /// Directory to write the exported representation files into.
    #[arg(long)]
    pub reprs_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GridArgs {
    /// Flat key=value spec file; flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated regimes, e.g. standard,multidetask.
    #[arg(long)]
    pub regimes: Option<String>,
    /// Comma-separated encoder sizes, default 8,16,32,64,128.
    #[arg(long)]
    pub dims: Option<String>,
    /// Comma-separated seeds, default 0.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, value_parser = parse_setting)]
    pub setting: Option<InputSetting>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub attack_epochs: Option<usize>,
    #[arg(long, default_value = "demo", value_parser = parse_metric)]
    pub metric: AttrKind,
    /// Worker count; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Grid output directory.
    #[arg(long)]
    pub dir: PathBuf,
}

fn parse_setting(s: &str) -> std::result::Result<InputSetting, String> {
    match s {
        "raw" => Ok(InputSetting::Raw),
        "demo" | "+demo" => Ok(InputSetting::Demo),
        other => Err(format!("unknown setting {other:?} (expected raw or demo)")),
    }
}

fn parse_metric(s: &str) -> std::result::Result<AttrKind, String> {
    match s {
        "demo" | "demographic" => Ok(AttrKind::Demographic),
        "ner" | "entity" => Ok(AttrKind::Entity),
        other => Err(format!("unknown metric {other:?} (expected demo or ner)")),
    }
}

impl clap::ValueEnum for Regime {
    fn value_variants<'a>() -> &'a [Self] {
        &[Regime::Standard, Regime::Multidetask, Regime::Advgen, Regime::Decluster]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Regime::Standard => "standard",
            Regime::Multidetask => "multidetask",
            Regime::Advgen => "advgen",
            Regime::Decluster => "decluster",
        }))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Report(args) => cmd_report(args),
    }
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = synth_config(&args)?;
    let corpus = synth_generate(&cfg)?;
    corpus.save_jsonl(&args.out)?;

    let train_n = corpus.split_indices(Split::Train).len();
    let dev_n = corpus.split_indices(Split::Dev).len();
    let test_n = corpus.split_indices(Split::Test).len();
    let mut class_counts = vec![0usize; corpus.labels.len()];
    for e in &corpus.examples {
        class_counts[e.label] += 1;
    }
    let corr = zy_correlation(&corpus);
    println!("wrote {} ({} examples: {train_n}/{dev_n}/{test_n})", args.out.display(), corpus.examples.len());
    println!("class counts: {class_counts:?}");
    println!("corr(z_0, label parity) = {corr:.3}");
    Ok(())
}

fn synth_config(args: &SynthArgs) -> Result<SynthConfig> {
    let kv = match &args.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let defaults = SynthConfig::default();
    Ok(SynthConfig {
        vocab_size: args
            .vocab_size
            .or(kv.get_parsed("vocab_size")?)
            .unwrap_or(defaults.vocab_size),
        classes: args.classes.or(kv.get_parsed("classes")?).unwrap_or(defaults.classes),
        k: args.k.or(kv.get_parsed("k")?).unwrap_or(defaults.k),
        n: args.n.or(kv.get_parsed("n")?).unwrap_or(defaults.n),
        label_signal: args
            .label_signal
            .or(kv.get_parsed("label_signal")?)
            .unwrap_or(defaults.label_signal),
        private_signal: args
            .private_signal
            .or(kv.get_parsed("private_signal")?)
            .unwrap_or(defaults.private_signal),
        rho: args.rho.or(kv.get_parsed("rho")?).unwrap_or(defaults.rho),
        seed: args.seed.or(kv.get_parsed("seed")?).unwrap_or(defaults.seed),
    })
}

fn zy_correlation(corpus: &Corpus) -> f64 {
    let xs: Vec<f64> = corpus.examples.iter().map(|e| e.private[0] as f64).collect();
    let ys: Vec<f64> = corpus.examples.iter().map(|e| (e.label % 2) as f64).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx.sqrt() * vy.sqrt())
    }
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let kv = match &args.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let regime = match args.regime {
        Some(r) => r,
        None => match kv.get("regime") {
            Some(s) => s.parse()?,
            None => Regime::Standard,
        },
    };
    let mut cfg = TrainConfig::new(regime);
    cfg.d = args.d.or(kv.get_parsed("d")?).unwrap_or(cfg.d);
    cfg.seed = args.seed.or(kv.get_parsed("seed")?).unwrap_or(cfg.seed);
    cfg.epochs = args.epochs.or(kv.get_parsed("epochs")?).unwrap_or(cfg.epochs);
    cfg.batch = args.batch.or(kv.get_parsed("batch")?).unwrap_or(cfg.batch);
    cfg.alpha = args.alpha.or(kv.get_parsed("alpha")?).unwrap_or(cfg.alpha);
    cfg.beta = args.beta.or(kv.get_parsed("beta")?).unwrap_or(cfg.beta);
    cfg.dropout = args.dropout.or(kv.get_parsed("dropout")?).unwrap_or(cfg.dropout);
    if let Some(s) = args.setting {
        cfg.setting = s;
    } else if let Some(s) = kv.get("setting") {
        cfg.setting = parse_setting(s).map_err(Error::Config)?;
    }
    Ok(cfg)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = train_config(&args)?;
    let corpus = Corpus::load_jsonl_seeded(&args.corpus, cfg.seed)?;
    let ckpt = train(&corpus, &cfg)?;
    for (i, (loss, acc)) in ckpt
        .epoch_train_loss
        .iter()
        .zip(&ckpt.epoch_dev_accuracy)
        .enumerate()
    {
        println!("epoch {:>2}: train loss {loss:.4}, dev accuracy {acc:.4}", i + 1);
    }
    println!("selected epoch {} (dev accuracy {:.4})", ckpt.epoch, ckpt.dev_accuracy);
    ckpt.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Everything `attack` does, reusable by `grid`: export representations,
/// train the attacker with worst-privacy selection, compute baselines, and
/// assemble the report.
pub fn run_attack_pipeline(
    ckpt: &MainCheckpoint,
    corpus: &Corpus,
    atk_cfg: &AttackConfig,
    shuffle_reprs: bool,
    upper_bound: bool,
    reprs_out: Option<&Path>,
) -> Result<PrivacyReport> {
    let mut reprs: Vec<_> = [Split::Train, Split::Dev, Split::Test]
        .into_iter()
        .map(|s| export_representations(ckpt, corpus, s))
        .collect::<Result<_>>()?;
    if let Some(dir) = reprs_out {
        std::fs::create_dir_all(dir)?;
        for (split, recs) in [Split::Train, Split::Dev, Split::Test].iter().zip(&reprs) {
            let path = dir.join(format!("reprs_{split}.txt"));
            write_repr_file(&path, ckpt.config.d, &corpus.attr_names, recs)?;
            let (d, _, loaded) = read_repr_file(&path)?;
            if d != ckpt.config.d || &loaded != recs {
                return Err(Error::Contract(format!(
                    "representation file {} did not round-trip",
                    path.display()
                )));
            }
        }
    }
    if shuffle_reprs {
        for recs in &mut reprs {
            *recs = crate::attack::shuffle_representations(recs, atk_cfg.seed);
        }
    }
    let (train_r, dev_r, test_r) = (&reprs[0], &reprs[1], &reprs[2]);

    let attacker = train_attacker(train_r, dev_r, atk_cfg)?;
    let attacker_accs = attacker_accuracies(&attacker, test_r)?;
    let privacy = crate::attack::attacker_privacy(&attacker, test_r, atk_cfg.kind)?;
    let attacker_f1 = match atk_cfg.kind {
        AttrKind::Demographic => None,
        AttrKind::Entity => Some(1.0 - privacy),
    };

    let main_accuracy = crate::attack::evaluate_accuracy(ckpt, corpus, Split::Test)?;
    let (_, baseline_main_accuracy) =
        most_frequent_baseline(corpus, BaselineTarget::MainLabel, Split::Test)?;
    let baseline_accuracies: Vec<f64> = (0..corpus.k())
        .map(|j| {
            most_frequent_baseline(corpus, BaselineTarget::Private(j), Split::Test)
                .map(|(_, a)| a)
        })
        .collect::<Result<_>>()?;
    let baseline_privacy = match atk_cfg.kind {
        AttrKind::Demographic => crate::attack::privacy_demographic(&baseline_accuracies)?,
        AttrKind::Entity => {
            // The most-frequent baseline predicts the majority bit for every
            // attribute; score it with the same F metric.
            let majorities: Vec<u8> = (0..corpus.k())
                .map(|j| {
                    most_frequent_baseline(corpus, BaselineTarget::Private(j), Split::Test)
                        .map(|(m, _)| m as u8)
                })
                .collect::<Result<_>>()?;
            let preds: Vec<Vec<u8>> = test_r.iter().map(|_| majorities.clone()).collect();
            let gold: Vec<&[u8]> = test_r.iter().map(|r| r.z.as_slice()).collect();
            crate::attack::privacy_ner(&preds, &gold, crate::attack::FScoreAveraging::Micro)?
        }
    };

    let upper_bound_accuracies = if upper_bound {
        let mut ub_cfg = ckpt.config.clone();
        ub_cfg.regime = Regime::Standard;
        Some(crate::attack::trained_upper_bound(corpus, &ub_cfg)?)
    } else {
        None
    };

    Ok(PrivacyReport {
        regime: ckpt.config.regime,
        d: ckpt.config.d,
        seed: ckpt.config.seed,
        setting: match ckpt.config.setting {
            InputSetting::Raw => "raw".into(),
            InputSetting::Demo => "demo".into(),
        },
        attr_kind: atk_cfg.kind,
        attr_names: corpus.attr_names.clone(),
        main_accuracy,
        attacker_accuracies: attacker_accs,
        attacker_f1,
        privacy,
        baseline_main_accuracy,
        baseline_accuracies,
        baseline_privacy,
        upper_bound_accuracies,
    })
}

pub fn cmd_attack(args: AttackArgs) -> Result<()> {
    let ckpt = MainCheckpoint::load(&args.checkpoint)?;
    let corpus = Corpus::load_jsonl_seeded(&args.corpus, ckpt.config.seed)?;
    let atk_cfg = AttackConfig {
        epochs: args.epochs.unwrap_or(16),
        batch: args.batch.unwrap_or(16),
        seed: args.seed.unwrap_or(ckpt.config.seed),
        kind: args.metric,
    };
    let report = run_attack_pipeline(
        &ckpt,
        &corpus,
        &atk_cfg,
        args.shuffle_reprs,
        args.upper_bound,
        args.reprs_out.as_deref(),
    )?;
    report.save(&args.out)?;
    print!("{}", report.to_kv());
    println!("wrote {}", args.out.display());
    Ok(())
}

struct GridSpec {
    corpus: PathBuf,
    out: PathBuf,
    regimes: Vec<Regime>,
    dims: Vec<usize>,
    seeds: Vec<u64>,
    setting: InputSetting,
    alpha: Option<f64>,
    beta: Option<f64>,
    epochs: Option<usize>,
    attack_epochs: usize,
    metric: AttrKind,
    jobs: usize,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| Error::config(format!("bad {what} entry {p:?}: {e}")))
        })
        .collect()
}

fn grid_spec(args: &GridArgs) -> Result<GridSpec> {
    let kv = match &args.spec {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let corpus = args
        .corpus
        .clone()
        .or_else(|| kv.get("corpus").map(PathBuf::from))
        .ok_or_else(|| Error::config("grid needs --corpus (or corpus= in the spec)"))?;
    let out = args
        .out
        .clone()
        .or_else(|| kv.get("out").map(PathBuf::from))
        .ok_or_else(|| Error::config("grid needs --out (or out= in the spec)"))?;
    let regimes_s = args
        .regimes
        .clone()
        .or_else(|| kv.get("regimes").map(str::to_string))
        .unwrap_or_else(|| "standard".into());
    let dims_s = args
        .dims
        .clone()
        .or_else(|| kv.get("dims").map(str::to_string))
        .unwrap_or_else(|| "8,16,32,64,128".into());
    let seeds_s = args
        .seeds
        .clone()
        .or_else(|| kv.get("seeds").map(str::to_string))
        .unwrap_or_else(|| "0".into());
    let setting = match args.setting {
        Some(s) => s,
        None => match kv.get("setting") {
            Some(s) => parse_setting(s).map_err(Error::Config)?,
            None => InputSetting::Raw,
        },
    };
    let jobs = args
        .jobs
        .or(kv.get_parsed("jobs")?)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    Ok(GridSpec {
        corpus,
        out,
        regimes: parse_list(&regimes_s, "regime")?,
        dims: parse_list(&dims_s, "dim")?,
        seeds: parse_list(&seeds_s, "seed")?,
        setting,
        alpha: args.alpha.or(kv.get_parsed("alpha")?),
        beta: args.beta.or(kv.get_parsed("beta")?),
        epochs: args.epochs.or(kv.get_parsed("epochs")?),
        attack_epochs: args.attack_epochs.or(kv.get_parsed("attack_epochs")?).unwrap_or(16),
        metric: args.metric,
        jobs: jobs.max(1),
    })
}

fn cell_dir(out: &Path, regime: Regime, d: usize, seed: u64) -> PathBuf {
    out.join(regime.to_string()).join(format!("d{d}")).join(format!("s{seed}"))
}

/// Run one grid cell end to end. Completed cells (report present) are
/// skipped; a present checkpoint short-circuits Phase 1 on resume.
fn run_cell(
    corpus: &Corpus,
    spec: &GridSpec,
    regime: Regime,
    d: usize,
    seed: u64,
) -> Result<PrivacyReport> {
    let dir = cell_dir(&spec.out, regime, d, seed);
    let report_path = dir.join("report.txt");
    if report_path.exists() {
        return PrivacyReport::load(&report_path);
    }
    std::fs::create_dir_all(&dir)?;

    let mut cfg = TrainConfig::new(regime);
    cfg.d = d;
    cfg.seed = seed;
    cfg.setting = spec.setting;
    if let Some(a) = spec.alpha {
        cfg.alpha = a;
    }
    if let Some(b) = spec.beta {
        cfg.beta = b;
    }
    if let Some(e) = spec.epochs {
        cfg.epochs = e;
    }

    let ckpt_path = dir.join("checkpoint.json");
    let ckpt = if ckpt_path.exists() {
        MainCheckpoint::load(&ckpt_path)?
    } else {
        let ckpt = train(corpus, &cfg)?;
        ckpt.save(&ckpt_path)?;
        ckpt
    };

    let atk_cfg = AttackConfig {
        epochs: spec.attack_epochs,
        batch: 16,
        seed,
        kind: spec.metric,
    };
    let report = run_attack_pipeline(&ckpt, corpus, &atk_cfg, false, false, Some(&dir))?;
    report.save(&report_path)?;
    Ok(report)
}

pub fn cmd_grid(args: GridArgs) -> Result<()> {
    let spec = grid_spec(&args)?;
    let corpus = Corpus::load_jsonl_seeded(&spec.corpus, 0)?;
    std::fs::create_dir_all(&spec.out)?;

    let mut cells = VecDeque::new();
    for &regime in &spec.regimes {
        for &d in &spec.dims {
            for &seed in &spec.seeds {
                cells.push_back((regime, d, seed));
            }
        }
    }
    let queue = Mutex::new(cells);
    let results: Mutex<Vec<PrivacyReport>> = Mutex::new(Vec::new());
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..spec.jobs {
            scope.spawn(|| loop {
                let cell = queue.lock().unwrap().pop_front();
                let Some((regime, d, seed)) = cell else { break };
                match run_cell(&corpus, &spec, regime, d, seed) {
                    Ok(report) => results.lock().unwrap().push(report),
                    Err(e) => failures
                        .lock()
                        .unwrap()
                        .push(format!("{regime}/d{d}/s{seed}: {e}")),
                }
            });
        }
    });

    let reports = results.into_inner().unwrap();
    let failures = failures.into_inner().unwrap();
    print!("{}", render_table(&reports));
    for f in &failures {
        eprintln!("cell failed: {f}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{} grid cell(s) failed", failures.len())))
    }
}

pub fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    collect_reports(&args.dir, &mut reports)?;
    if reports.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no report.txt files under {}",
            args.dir.display()
        )));
    }
    print!("{}", render_table(&reports));
    Ok(())
}

fn collect_reports(dir: &Path, out: &mut Vec<PrivacyReport>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_reports(&path, out)?;
        } else if path.file_name().map(|n| n == "report.txt").unwrap_or(false) {
            out.push(PrivacyReport::load(&path)?);
        }
    }
    Ok(())
}
