//! The `gen`, `train` and `eval` subcommands.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use twin_uq::checkpoint::Checkpoint;
use twin_uq::dataset::Dataset;
use twin_uq::eval::VarianceKappaRow;
use twin_uq::pipeline::{self, EvalReport, EvalRequest, FixedVariance, GenConfig, TrainRequest};
use twin_uq::training::TrainConfig;
use twin_uq::{Architecture, ModelKind};

use crate::manifest::RunManifest;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const RELIABILITY_FILE: &str = "reliability.csv";
pub const VARIANCE_FILE: &str = "variance_kappa.csv";

#[derive(Debug)]
pub enum CliError {
    Core(twin_uq::Error),
    Refused(String),
    Io { path: PathBuf, source: io::Error },
    Format(String),
    Invalid(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Core(e) => write!(f, "{e}"),
            Self::Refused(m) => write!(f, "{m}"),
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Format(m) => write!(f, "malformed file: {m}"),
            Self::Invalid(m) => write!(f, "output failed validation: {m}"),
        }
    }
}

impl From<twin_uq::Error> for CliError {
    fn from(e: twin_uq::Error) -> Self {
        Self::Core(e)
    }
}

impl CliError {
    /// 3 configuration, 4 file access, 5 malformed input, 6 numerical
    /// contract, 7 output validation. Usage errors exit with 2.
    pub fn exit_code(&self) -> u8 {
        use twin_uq::Error as E;
        match self {
            Self::Refused(_) | Self::Core(E::Config(_)) => 3,
            Self::Io { .. } | Self::Core(E::Io { .. }) => 4,
            Self::Format(_) | Self::Core(E::Format(_) | E::Json(_)) => 5,
            Self::Core(_) => 6,
            Self::Invalid(_) => 7,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(e: serde_json::Error) -> Self {
        Self::Format(e.to_string())
    }
}

/// Twin ids such as `1`, `1..7`, `1,2` or `1..3,5`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TwinIds(pub Vec<u16>);

impl std::str::FromStr for TwinIds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut ids = Vec::new();
        for part in s.split(',').map(str::trim) {
            let parse = |v: &str| v.trim().parse::<u16>().map_err(|_| format!("invalid twin id `{v}`"));
            match part.split_once("..") {
                Some((a, b)) => {
                    let (a, b) = (parse(a)?, parse(b)?);
                    if a > b {
                        return Err(format!("empty twin range `{part}`"));
                    }
                    ids.extend(a..=b);
                }
                None => ids.push(parse(part)?),
            }
        }
        if ids.contains(&0) {
            return Err("twin ids start at 1".into());
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != ids.len() {
            return Err(format!("duplicate twin ids in `{s}`"));
        }
        Ok(Self(ids))
    }
}

fn parse_fixed_variance(s: &str) -> Result<FixedVariance, String> {
    if s == "auto" {
        return Ok(FixedVariance::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 => Ok(FixedVariance::Value(v)),
        _ => Err(format!("expected `auto` or a non-negative number, got `{s}`")),
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenArgs {
    /// Number of twin instances
    #[arg(long, default_value_t = 3)]
    pub twins: usize,
    /// Line segments (classes = segments + 1)
    #[arg(long, default_value_t = 6)]
    pub segments: usize,
    /// Windows generated by each twin
    #[arg(long, default_value_t = 700)]
    pub samples_per_twin: usize,
    /// Relative parameter divergence between twins
    #[arg(long, default_value_t = twin_uq::twin::DEFAULT_DIVERGENCE)]
    pub divergence: f64,
    /// Sensor noise standard deviation
    #[arg(long, default_value_t = twin_uq::twin::DEFAULT_NOISE_STD)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory
    #[arg(long, default_value_t = false)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Model kind: plain, adf or het
    #[arg(long, default_value = "plain")]
    pub model: ModelKind,
    /// Architecture: fc or conv1d
    #[arg(long, default_value = "fc")]
    pub arch: Architecture,
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training twins, e.g. `1`, `1..7` or `1,2`
    #[arg(long, default_value = "1")]
    pub train_twins: TwinIds,
    /// Train plain/HET models on the mean across the training twins
    #[arg(long, default_value_t = false)]
    pub fuse: bool,
    /// Logit draws per sample for the sampled losses
    #[arg(long, default_value_t = twin_uq::losses::TRAIN_DRAWS)]
    pub t_samples: usize,
    /// Epochs without validation improvement before the learning rate decays
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    /// Learning-rate decay factor on a plateau
    #[arg(long, default_value_t = 0.1)]
    pub lr_decay: f64,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and metrics
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory
    #[arg(long, default_value_t = false)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Checkpoint file, or a training output directory containing one
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Twins to evaluate on [default: the checkpoint's training twins]
    #[arg(long)]
    pub eval_twins: Option<TwinIds>,
    /// MC-dropout passes
    #[arg(long, default_value_t = twin_uq::uncertainty::DEFAULT_PASSES)]
    pub k_passes: usize,
    /// Logit draws per pass for HET aleatoric variance
    #[arg(long, default_value_t = twin_uq::losses::EVAL_DRAWS)]
    pub t_samples: usize,
    /// Constant input variance for ADF models: a number, or `auto` for the dataset average
    #[arg(long, value_parser = parse_fixed_variance)]
    pub fixed_variance: Option<FixedVariance>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the reports
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory
    #[arg(long, default_value_t = false)]
    #[serde(skip)]
    pub force: bool,
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(CliError::io(p))
}

fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(CliError::Refused(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(CliError::io(path))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Format(format!("{}: {e}", path.display()))
}

/// Reads back a CSV file and checks its header and row count.
fn validate_csv(path: &Path, header: &[&str], rows: usize) -> Result<(), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let found: Vec<String> = r
        .headers()
        .map_err(|e| CliError::Invalid(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header {
        return Err(CliError::Invalid(format!("{}: header {found:?}, expected {header:?}", path.display())));
    }
    let count = r.records().map(|rec| rec.map(|_| ())).collect::<Result<Vec<_>, _>>().map_err(|e| CliError::Invalid(e.to_string()))?.len();
    if count != rows {
        return Err(CliError::Invalid(format!("{}: {count} rows, expected {rows}", path.display())));
    }
    Ok(())
}

pub fn gen(mut args: GenArgs) -> Result<(), CliError> {
    args.out = absolute(&args.out)?;
    prepare_out(&args.out, args.force)?;
    let data = pipeline::generate(&GenConfig {
        twins: args.twins,
        segments: args.segments,
        samples_per_twin: args.samples_per_twin,
        divergence: args.divergence,
        noise_std: args.noise_std,
        seed: args.seed,
    })?;
    data.save(&args.out)?;
    let reloaded = Dataset::load(&args.out).map_err(|e| CliError::Invalid(e.to_string()))?;
    if reloaded != data {
        return Err(CliError::Invalid("dataset does not round-trip".into()));
    }
    let outputs = vec![
        args.out.join(twin_uq::dataset::MANIFEST_FILE),
        args.out.join(twin_uq::dataset::RECORDS_FILE),
    ];
    RunManifest::new("gen", &args, args.seed, Vec::new(), outputs)?.write(&args.out)?;
    println!(
        "wrote {} windows ({} twins x {}) to {}",
        data.windows.len(),
        args.twins,
        args.samples_per_twin,
        args.out.display()
    );
    Ok(())
}

pub fn train(mut args: TrainArgs) -> Result<(), CliError> {
    args.out = absolute(&args.out)?;
    args.data = absolute(&args.data)?;
    let data = Dataset::load(&args.data)?;
    let config = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch,
        plateau_patience: args.patience,
        lr_decay_factor: args.lr_decay,
        seed: args.seed,
        draws: args.t_samples,
        kind: args.model,
        architecture: args.arch,
        ..TrainConfig::default()
    };
    let request = TrainRequest {
        config,
        train_twins: args.train_twins.0.clone(),
        fuse: args.fuse,
    };
    if args.model == ModelKind::Adf && args.fuse {
        return Err(twin_uq::Error::Config("--fuse applies to plain and HET models".into()).into());
    }
    prepare_out(&args.out, args.force)?;
    let ck = pipeline::train_on_dataset(&data, &request)?;
    let ck_path = args.out.join(CHECKPOINT_FILE);
    ck.save(&ck_path)?;
    let metrics = args.out.join(METRICS_FILE);
    write_csv(&metrics, &ck.header.history)?;
    let loaded = Checkpoint::load(&ck_path).map_err(|e| CliError::Invalid(e.to_string()))?;
    if loaded != ck {
        return Err(CliError::Invalid("checkpoint does not round-trip".into()));
    }
    validate_csv(
        &metrics,
        &["epoch", "train_loss", "val_loss", "val_accuracy", "learning_rate"],
        ck.header.history.len(),
    )?;
    RunManifest::new("train", &args, args.seed, vec![args.data.clone()], vec![ck_path, metrics])?.write(&args.out)?;
    println!(
        "trained {} {} on twins {:?}: best epoch {}, validation accuracy {:.4}",
        args.model,
        args.arch,
        args.train_twins.0,
        ck.header.best_epoch,
        ck.header.best_val_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct ReliabilityRow {
    bin_low: f64,
    bin_high: f64,
    confidence: Option<f64>,
    accuracy: Option<f64>,
    count: usize,
}

pub fn eval(mut args: EvalArgs) -> Result<(), CliError> {
    args.out = absolute(&args.out)?;
    args.data = absolute(&args.data)?;
    args.checkpoint = absolute(&args.checkpoint)?;
    if args.checkpoint.is_dir() {
        args.checkpoint = args.checkpoint.join(CHECKPOINT_FILE);
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let data = Dataset::load(&args.data)?;
    let eval_twins = args.eval_twins.clone().unwrap_or_else(|| TwinIds(ck.header.train_twins.clone()));
    args.eval_twins = Some(eval_twins.clone());
    prepare_out(&args.out, args.force)?;
    let out = pipeline::evaluate_checkpoint(
        &ck,
        &data,
        &EvalRequest {
            eval_twins: eval_twins.0,
            passes: args.k_passes,
            draws: args.t_samples,
            seed: args.seed,
            fixed_variance: args.fixed_variance,
        },
    )?;
    let report_path = args.out.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&out.report).map_err(CliError::json)?;
    fs::write(&report_path, text).map_err(CliError::io(&report_path))?;
    let rel_path = args.out.join(RELIABILITY_FILE);
    let rows: Vec<ReliabilityRow> = out
        .reliability
        .bins
        .iter()
        .map(|b| ReliabilityRow {
            bin_low: b.low,
            bin_high: b.high,
            confidence: b.confidence,
            accuracy: b.accuracy,
            count: b.count,
        })
        .collect();
    write_csv(&rel_path, &rows)?;
    let var_path = args.out.join(VARIANCE_FILE);
    write_csv::<VarianceKappaRow>(&var_path, &out.variance_kappa)?;

    let text = fs::read_to_string(&report_path).map_err(CliError::io(&report_path))?;
    let back: EvalReport = serde_json::from_str(&text).map_err(|e| CliError::Invalid(e.to_string()))?;
    if back.samples.len() != back.samples_evaluated
        || back.samples.iter().any(|s| s.sigma2_total != s.sigma2_al + s.sigma2_ep)
    {
        return Err(CliError::Invalid(format!("{}: inconsistent report", report_path.display())));
    }
    validate_csv(&rel_path, &["bin_low", "bin_high", "confidence", "accuracy", "count"], rows.len())?;
    validate_csv(
        &var_path,
        &["kappa_low", "kappa_high", "mean_al", "mean_ep", "count_correct", "count_incorrect"],
        out.variance_kappa.len(),
    )?;
    RunManifest::new(
        "eval",
        &args,
        args.seed,
        vec![args.checkpoint.clone(), args.data.clone()],
        vec![report_path, rel_path, var_path],
    )?
    .write(&args.out)?;
    if out.report.single_pass_warning {
        eprintln!("warning: a single pass gives no epistemic variance; sigma2_ep is reported as 0");
    }
    println!(
        "evaluated {} samples: accuracy {:.4}, ECE {:.4}",
        out.report.samples_evaluated, out.report.accuracy, out.report.ece
    );
    Ok(())
}
