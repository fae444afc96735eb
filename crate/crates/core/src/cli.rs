//! Command implementations behind the `ndt` binary.
//!
//! Every command resolves its settings as flag > `--config` file > default.
//! Outputs go to `--out`, or `$NDT_OUT/<command>` (`runs/<command>` when the
//! variable is unset).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention::ConstraintKind;
use crate::data::{build_vocab, encode_dataset, DataSource, Vocab, DEFAULT_MIN_FREQUENCY};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, write_confusion_csv, write_embeddings_tsv, write_eval_json, write_roc_csv, EvalResult};
use crate::model::{load_checkpoint, save_checkpoint, ClassifierModel, Mechanism, ModelConfig};
use crate::training::{train_with, OptimConfig, TrainReport};
use crate::verify;

pub const OUT_ENV: &str = "NDT_OUT";

/// Epoch budget of `compare` unless `--epochs` is given; keeps the
/// 14-model grid on `synthetic:2:2048` within minutes on one core.
pub const COMPARE_EPOCHS: usize = 3;

#[derive(Debug, Parser)]
#[command(name = "ndt", version, about = "Train and evaluate multi-component attention text classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its checkpoint, vocabulary and report.
    Train(RunArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalArgs),
    /// Train and evaluate the 14-configuration grid.
    Compare(CompareArgs),
    /// Print the learned coefficients of a checkpoint.
    Lambdas(LambdasArgs),
    /// Run the built-in property suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// `synthetic:<classes>:<n>` or a directory with train/val/test.csv
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub mechanism: Option<Mechanism>,
    #[arg(long)]
    pub constraint: Option<ConstraintKind>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=4))]
    pub components: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub ffn_hidden: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// `key=value` file using the long flag names as keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Defaults to the data source recorded beside the checkpoint.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub timing_repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 5)]
    pub timing_repeats: usize,
}

#[derive(Debug, Clone, Args)]
pub struct LambdasArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Command failure: bad invocation (exit 2) or runtime error (exit 1).
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Fully resolved settings of one training run, saved as `run_config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: String,
    pub seed: u64,
    pub min_frequency: usize,
    /// `vocab_size` and `n_classes` are filled in once data is loaded.
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

/// Parses a `key=value` config file. Blank lines and `#` comments are
/// skipped; keys are flag names with `-` or `_`.
pub fn parse_config_file(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value, got '{line}'", i + 1))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(format!("config line {}: unknown key '{key}'", i + 1));
        }
        map.insert(key, v.trim().to_owned());
    }
    Ok(map)
}

const CONFIG_KEYS: &[&str] = &[
    "data", "mechanism", "constraint", "components", "d-model", "heads", "layers", "ffn-hidden", "max-seq-len", "lr",
    "batch-size", "epochs", "seed", "min-freq", "dropout", "weight-decay", "out",
];

struct Layered<'a> {
    file: &'a BTreeMap<String, String>,
}

impl Layered<'_> {
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> std::result::Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(v) => v.parse().map(Some).map_err(|e| format!("config key '{key}': {e}")),
            None => Ok(None),
        }
    }
}

fn default_out(command: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(command)
}

impl RunArgs {
    /// Resolves settings and the output directory.
    pub fn resolve(&self, command: &str, default_epochs: usize) -> std::result::Result<(RunConfig, PathBuf), Failure> {
        let file = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
                parse_config_file(&text).map_err(Failure::Usage)?
            }
            None => BTreeMap::new(),
        };
        let l = Layered { file: &file };
        let u = Failure::Usage;
        let data = l.get(self.data.clone(), "data").map_err(u)?.unwrap_or_else(|| "synthetic:2:512".into());
        DataSource::from_str(&data).map_err(|e| Failure::Usage(e.to_string()))?;
        let mechanism = l.get(self.mechanism, "mechanism").map_err(u)?.unwrap_or(Mechanism::Ndt);
        let constraint = l.get(self.constraint, "constraint").map_err(u)?;
        let components = l.get(self.components, "components").map_err(u)?;
        let base = ModelConfig::new(0, 0);
        let d_model = l.get(self.d_model, "d-model").map_err(u)?.unwrap_or(base.d_model);
        let mut model = base.with_width(d_model);
        model.mechanism = mechanism;
        model.n_heads = l.get(self.heads, "heads").map_err(u)?.unwrap_or(model.n_heads);
        model.n_layers = l.get(self.layers, "layers").map_err(u)?.unwrap_or(model.n_layers);
        model.ffn_hidden = l.get(self.ffn_hidden, "ffn-hidden").map_err(u)?.unwrap_or(model.ffn_hidden);
        model.max_seq_len = l.get(self.max_seq_len, "max-seq-len").map_err(u)?.unwrap_or(model.max_seq_len);
        model.dropout = l.get(self.dropout, "dropout").map_err(u)?.unwrap_or(0.0);
        match mechanism {
            Mechanism::Ndt => {
                model.constraint = constraint.unwrap_or(model.constraint);
                model.n_components = components.map_or(model.n_components, |c| c as usize);
            }
            Mechanism::Dt => {
                if components.is_some_and(|c| c != 2) {
                    return Err(Failure::Usage("dt always uses 2 components".into()));
                }
                model.constraint = crate::attention::DtAttentionLayer::CONSTRAINT;
                model.n_components = 2;
            }
            Mechanism::Vanilla => model.n_components = 1,
        }
        let mut optim = OptimConfig::default();
        optim.learning_rate = l.get(self.lr, "lr").map_err(u)?.unwrap_or(optim.learning_rate);
        optim.batch_size = l.get(self.batch_size, "batch-size").map_err(u)?.unwrap_or(optim.batch_size);
        optim.epochs = l.get(self.epochs, "epochs").map_err(u)?.unwrap_or(default_epochs);
        optim.seed = l.get(self.seed, "seed").map_err(u)?.unwrap_or(0);
        optim.weight_decay_main = l.get(self.weight_decay, "weight-decay").map_err(u)?.unwrap_or(optim.weight_decay_main);
        optim.validate()?;
        let min_frequency = l.get(self.min_freq, "min-freq").map_err(u)?.unwrap_or(DEFAULT_MIN_FREQUENCY);
        let out = l.get(self.out.clone(), "out").map_err(u)?.unwrap_or_else(|| default_out(command));
        Ok((
            RunConfig {
                data,
                seed: optim.seed,
                min_frequency,
                model,
                optim,
            },
            out,
        ))
    }
}

/// Encoded splits plus the vocabulary built from the training split.
pub struct Prepared {
    pub vocab: Vocab,
    pub train: crate::data::Dataset,
    pub val: crate::data::Dataset,
    pub test: crate::data::Dataset,
}

/// Loads data and fills `vocab_size`/`n_classes` into `cfg.model`.
pub fn prepare(cfg: &mut RunConfig) -> Result<Prepared> {
    let source: DataSource = cfg.data.parse()?;
    let splits = source.load(cfg.seed)?;
    let vocab = build_vocab(&splits.train.texts, cfg.min_frequency)?;
    cfg.model.vocab_size = vocab.len();
    cfg.model.n_classes = splits.train.n_classes;
    let m = cfg.model.max_seq_len;
    Ok(Prepared {
        train: encode_dataset(&splits.train, &vocab, m),
        val: encode_dataset(&splits.val, &vocab, m),
        test: encode_dataset(&splits.test, &vocab, m),
        vocab,
    })
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Wall-clock facts kept apart from deterministic outputs.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    started_unix: u64,
    finished_unix: u64,
    elapsed_seconds: f64,
    files: Vec<String>,
}

fn write_manifest(dir: &Path, command: &str, started: u64, clock: Instant, files: &[&str]) -> Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: unix_now(),
        elapsed_seconds: clock.elapsed().as_secs_f64(),
        files: files.iter().map(|s| s.to_string()).collect(),
    };
    write_file(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&m)? + "\n"))
}

fn epoch_line(e: &crate::training::EpochRecord) -> String {
    let mut s = format!(
        "epoch {:>3}  loss {:.4}  train acc {:.4}  val acc {:.4}",
        e.epoch, e.train_loss, e.train_acc, e.val_acc
    );
    for l in &e.lambdas {
        write!(s, "  λ[{}.{}]={:.4}", l.layer, l.component, l.value).unwrap();
    }
    s
}

pub fn cmd_train(args: &RunArgs) -> std::result::Result<(), Failure> {
    let (mut cfg, out) = args.resolve("train", OptimConfig::default().epochs)?;
    let (started, clock) = (unix_now(), Instant::now());
    let data = prepare(&mut cfg)?;
    let mut model = ClassifierModel::new(cfg.model.clone(), cfg.seed)?;
    eprintln!(
        "training {} on {} ({} train / {} val examples, vocab {})",
        describe(&cfg.model),
        cfg.data,
        data.train.len(),
        data.val.len(),
        data.vocab.len()
    );
    let report = train_with(&mut model, &data.train, &data.val, &cfg.optim, |e| eprintln!("{}", epoch_line(e)))?;
    create_dir(&out)?;
    save_checkpoint(&out.join("model.ckpt"), &model, Some(&data.vocab.fingerprint()))?;
    data.vocab.save(&out.join("vocab.txt"))?;
    report.write_jsonl(&out.join("train_report.jsonl"))?;
    write_file(&out.join("run_config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    write_manifest(
        &out,
        "train",
        started,
        clock,
        &["model.ckpt", "vocab.txt", "train_report.jsonl", "run_config.json"],
    )?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "final train acc {:.4}, best val acc {:.4} (epoch {}); artifacts in {}",
        last.train_acc,
        report.best_val_acc,
        report.best_epoch,
        out.display()
    );
    Ok(())
}

fn describe(m: &ModelConfig) -> String {
    match m.mechanism {
        Mechanism::Vanilla => "vanilla".into(),
        Mechanism::Dt => "dt".into(),
        Mechanism::Ndt => format!("ndt {} N={}", m.constraint, m.n_components),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> std::result::Result<(), Failure> {
    let (started, clock) = (unix_now(), Instant::now());
    let dir = args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let vocab_path = args.vocab.clone().unwrap_or_else(|| dir.join("vocab.txt"));
    let vocab = Vocab::load(&vocab_path)?;
    let found = vocab.fingerprint();
    match &ckpt.vocab_fingerprint {
        Some(expected) if *expected != found => {
            return Err(Error::VocabMismatch(format!("checkpoint expects vocabulary {expected}, {} is {found}", vocab_path.display())).into())
        }
        _ if vocab.len() != ckpt.model.config.vocab_size => {
            return Err(Error::VocabMismatch(format!(
                "checkpoint has {} tokens, {} has {}",
                ckpt.model.config.vocab_size,
                vocab_path.display(),
                vocab.len()
            ))
            .into())
        }
        _ => {}
    }
    let recorded: Option<RunConfig> = fs::read_to_string(dir.join("run_config.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let data = args
        .data
        .clone()
        .or_else(|| recorded.as_ref().map(|r| r.data.clone()))
        .ok_or_else(|| Failure::Usage("--data is required when no run_config.json sits beside the checkpoint".into()))?;
    let seed = args.seed.or(recorded.as_ref().map(|r| r.seed)).unwrap_or(0);
    let source: DataSource = data.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let splits = source.load(seed)?;
    let text = match args.split {
        SplitArg::Train => splits.train,
        SplitArg::Val => splits.val,
        SplitArg::Test => splits.test,
    };
    let model = ckpt.model;
    if text.n_classes != model.config.n_classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but {data} has {}",
            model.config.n_classes, text.n_classes
        ))
        .into());
    }
    let ds = encode_dataset(&text, &vocab, model.config.max_seq_len);
    let ev = evaluate(&model, &ds, args.batch_size, args.timing_repeats)?;
    let out = args.out.clone().unwrap_or_else(|| default_out("eval"));
    create_dir(&out)?;
    write_eval_json(&out.join("eval.json"), &ev.result)?;
    write_confusion_csv(&out.join("confusion.csv"), &ev.result.confusion)?;
    write_roc_csv(&out.join("roc.csv"), &ev.result.roc_points)?;
    write_embeddings_tsv(&out.join("embeddings.tsv"), &ev.embeddings, model.config.d_model, &ev.labels)?;
    write_manifest(
        &out,
        "eval",
        started,
        clock,
        &["eval.json", "confusion.csv", "roc.csv", "embeddings.tsv"],
    )?;
    let r = &ev.result;
    println!(
        "{} examples: accuracy {:.4}, precision {:.4}, F1 {:.4}, AUC {:.4}, silhouette {:.4}, {:.3} ms/batch",
        r.n_examples, r.accuracy, r.precision_macro, r.f1_macro, r.auc, r.silhouette, r.inference_ms_per_batch
    );
    Ok(())
}

/// One configuration of the comparison grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridEntry {
    pub mechanism: Mechanism,
    pub constraint: ConstraintKind,
    pub components: usize,
}

impl GridEntry {
    pub fn label(&self) -> String {
        match self.mechanism {
            Mechanism::Vanilla => "Vanilla".into(),
            Mechanism::Dt => "DT".into(),
            Mechanism::Ndt => format!("NDT {} N={}", self.constraint.label(), self.components),
        }
    }

    pub fn slug(&self) -> String {
        match self.mechanism {
            Mechanism::Vanilla => "vanilla".into(),
            Mechanism::Dt => "dt".into(),
            Mechanism::Ndt => format!("ndt-{}-{}", self.constraint, self.components),
        }
    }
}

/// Vanilla, DT, then NDT for each constraint kind with 2, 3 and 4 components.
pub fn comparison_grid() -> Vec<GridEntry> {
    let mut g = vec![
        GridEntry {
            mechanism: Mechanism::Vanilla,
            constraint: ConstraintKind::Bounded01,
            components: 1,
        },
        GridEntry {
            mechanism: Mechanism::Dt,
            constraint: ConstraintKind::NonNegative,
            components: 2,
        },
    ];
    for kind in ConstraintKind::ALL {
        for n in 2..=4 {
            g.push(GridEntry {
                mechanism: Mechanism::Ndt,
                constraint: kind,
                components: n,
            });
        }
    }
    g
}

/// Outcome of one grid configuration.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub entry: GridEntry,
    pub result: std::result::Result<(EvalResult, Vec<(usize, usize, f64)>), String>,
}

fn run_entry(entry: GridEntry, base: &RunConfig, data: &Prepared, timing_repeats: usize, dir: &Path) -> Result<(EvalResult, Vec<(usize, usize, f64)>)> {
    let mut cfg = base.model.clone();
    cfg.mechanism = entry.mechanism;
    cfg.constraint = entry.constraint;
    cfg.n_components = entry.components;
    let mut model = ClassifierModel::new(cfg, base.seed)?;
    let report: TrainReport = train_with(&mut model, &data.train, &data.val, &base.optim, |_| {})?;
    let ev = evaluate(&model, &data.test, base.optim.batch_size, timing_repeats)?;
    create_dir(dir)?;
    report.write_jsonl(&dir.join("train_report.jsonl"))?;
    write_eval_json(&dir.join("eval.json"), &ev.result)?;
    Ok((ev.result, model.lambda_snapshot()))
}

/// Trains and evaluates every grid entry on shared data and seed, writing
/// per-configuration results under `out/<slug>/`.
pub fn run_compare(base: &RunConfig, data: &Prepared, timing_repeats: usize, out: &Path) -> Vec<GridRow> {
    comparison_grid()
        .into_iter()
        .map(|entry| {
            let t = Instant::now();
            let result = run_entry(entry, base, data, timing_repeats, &out.join(entry.slug())).map_err(|e| e.to_string());
            match &result {
                Ok((r, _)) => eprintln!("{:<22} acc {:.4}  ({:.1}s)", entry.label(), r.accuracy, t.elapsed().as_secs_f64()),
                Err(e) => eprintln!("{:<22} FAILED: {e}", entry.label()),
            }
            GridRow { entry, result }
        })
        .collect()
}

pub const SUMMARY_COLUMNS: &[&str] = &[
    "model", "mechanism", "constraint", "components", "status", "accuracy", "precision", "recall", "f1", "auc",
    "silhouette", "params", "delta_params", "ms_per_batch", "ms_cv",
];

/// Full-precision CSV summary, one row per grid entry.
pub fn summary_csv(rows: &[GridRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Metric(e.to_string());
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for row in rows {
        let e = row.entry;
        let mut rec = vec![
            e.label(),
            e.mechanism.to_string(),
            if e.mechanism == Mechanism::Vanilla { String::new() } else { e.constraint.to_string() },
            e.components.to_string(),
        ];
        match &row.result {
            Ok((r, _)) => {
                rec.push("ok".into());
                for v in [r.accuracy, r.precision_macro, r.recall_macro, r.f1_macro, r.auc, r.silhouette] {
                    rec.push(v.to_string());
                }
                rec.push(r.params_total.to_string());
                rec.push(r.delta_params_vs_vanilla.to_string());
                rec.push(r.inference_ms_per_batch.to_string());
                rec.push(r.inference_cv.to_string());
            }
            Err(msg) => {
                rec.push(format!("failed: {msg}"));
                rec.extend(std::iter::repeat_n(String::new(), SUMMARY_COLUMNS.len() - 5));
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Metric(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Aligned text table: percentages to 2 decimals.
pub fn summary_text(rows: &[GridRow]) -> String {
    let mut s = format!(
        "{:<18} {:>8} {:>9} {:>8} {:>8} {:>10} {:>9} {:>9} {:>9}\n",
        "Model", "Acc %", "Prec %", "F1 %", "AUC %", "Silhouette", "Params", "ΔParams", "ms/batch"
    );
    for row in rows {
        match &row.result {
            Ok((r, _)) => writeln!(
                s,
                "{:<18} {:>8.2} {:>9.2} {:>8.2} {:>8.2} {:>10.4} {:>9} {:>9} {:>9.2}",
                row.entry.label(),
                100.0 * r.accuracy,
                100.0 * r.precision_macro,
                100.0 * r.f1_macro,
                100.0 * r.auc,
                r.silhouette,
                r.params_total,
                r.delta_params_vs_vanilla,
                r.inference_ms_per_batch
            )
            .unwrap(),
            Err(msg) => writeln!(s, "{:<18} failed: {msg}", row.entry.label()).unwrap(),
        }
    }
    s
}

/// `model,layer,component,lambda` for every NDT and DT row.
pub fn lambda_csv(rows: &[GridRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Metric(e.to_string());
    w.write_record(["model", "layer", "component", "lambda"]).map_err(csv_err)?;
    for row in rows {
        if let Ok((_, lambdas)) = &row.result {
            for (l, c, v) in lambdas {
                w.write_record([row.entry.label(), l.to_string(), c.to_string(), v.to_string()]).map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Metric(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One block per NDT variant with a line per layer listing λ₁..λ_{N−1}.
pub fn lambda_text(rows: &[GridRow]) -> String {
    let mut s = String::new();
    for row in rows.iter().filter(|r| r.entry.mechanism == Mechanism::Ndt) {
        let Ok((_, lambdas)) = &row.result else {
            writeln!(s, "{}: failed\n", row.entry.label()).unwrap();
            continue;
        };
        write!(s, "{}\n{:<8}", row.entry.label(), "").unwrap();
        for c in 1..row.entry.components {
            write!(s, " {:>8}", format!("λ{c}")).unwrap();
        }
        s.push('\n');
        let n_layers = lambdas.iter().map(|x| x.0).max().unwrap_or(0);
        for layer in 1..=n_layers {
            write!(s, "{:<8}", format!("Layer {layer}")).unwrap();
            for (_, _, v) in lambdas.iter().filter(|x| x.0 == layer) {
                write!(s, " {v:>8.4}").unwrap();
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

pub fn cmd_compare(args: &CompareArgs) -> std::result::Result<(), Failure> {
    if args.run.mechanism.is_some() || args.run.constraint.is_some() || args.run.components.is_some() {
        return Err(Failure::Usage("compare runs the fixed grid; drop --mechanism/--constraint/--components".into()));
    }
    let (mut cfg, out) = args.run.resolve("compare", COMPARE_EPOCHS)?;
    let (started, clock) = (unix_now(), Instant::now());
    let data = prepare(&mut cfg)?;
    create_dir(&out)?;
    eprintln!("comparing 14 configurations on {} ({} train examples)", cfg.data, data.train.len());
    let rows = run_compare(&cfg, &data, args.timing_repeats, &out);
    write_file(&out.join("summary.csv"), &summary_csv(&rows)?)?;
    let text = summary_text(&rows);
    write_file(&out.join("summary.txt"), &text)?;
    write_file(&out.join("lambdas.csv"), &lambda_csv(&rows)?)?;
    let lt = lambda_text(&rows);
    write_file(&out.join("lambdas.txt"), &lt)?;
    write_file(&out.join("run_config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    write_manifest(
        &out,
        "compare",
        started,
        clock,
        &["summary.csv", "summary.txt", "lambdas.csv", "lambdas.txt", "run_config.json"],
    )?;
    print!("{text}\n{lt}");
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        return Err(Error::Config(format!("{failed} of {} configurations failed", rows.len())).into());
    }
    Ok(())
}

pub fn cmd_lambdas(args: &LambdasArgs) -> std::result::Result<(), Failure> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let m = &ckpt.model;
    println!("{}", describe(&m.config));
    let snap = m.lambda_snapshot();
    if snap.is_empty() {
        println!("(no learned coefficients)");
    }
    for (l, c, v) in snap {
        println!("layer {l} component {c}: {v:.6}");
    }
    Ok(())
}

pub fn cmd_verify(args: &VerifyArgs) -> std::result::Result<(), Failure> {
    let report = verify::run_all(args.seed)?;
    for c in &report.checks {
        println!("{} [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.suite, c.name, c.detail);
    }
    let out = args.out.clone().unwrap_or_else(|| default_out("verify"));
    create_dir(&out)?;
    write_file(&out.join("verify_report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::Config(format!("{failed} properties failed")).into());
    }
    println!("all {} properties passed", report.checks.len());
    Ok(())
}

pub fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Lambdas(a) => cmd_lambdas(a),
        Command::Verify(a) => cmd_verify(a),
    }
}
