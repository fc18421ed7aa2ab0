//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Logs go to standard error; tables and results go to standard output.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    batch_indices, load_split, vhs_to_class, LoadOptions, SplitRole, VhsScore, DEFAULT_IMAGE_SIZE,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::CardioNetConfig;
use crate::optim::AdamConfig;
use crate::predict::{predict_split, CsvFormat, PREDICTIONS_CSV};
use crate::trainer::{self, TrainConfig, BEST_CHECKPOINT, HISTORY_CSV, RUN_JSON};

pub const DATA_ENV: &str = "CARDIONET_DATA";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cardionet",
    version,
    about = "Canine cardiomegaly CNN classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and keep the checkpoint with the lowest validation loss.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled split.
    Evaluate(EvaluateArgs),
    /// Export predictions for every image of a split as CSV.
    Predict(PredictArgs),
    /// Print per-split, per-class image counts.
    InspectData(InspectArgs),
    /// Map a vertebral heart scale score to its size class.
    Vhs(VhsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset root containing train/, valid/ and test/ [env: CARDIONET_DATA]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Fail on unreadable images and empty splits instead of skipping them.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for best.ckpt, history.csv and run.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record wall-clock epoch durations in history.csv.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Labeled split to score: train or valid.
    #[arg(long, default_value = "valid")]
    pub split: String,
    /// Directory for the JSON report (default: the checkpoint's directory).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory for predictions.csv (default: the checkpoint's directory).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// `full` (index and probabilities) or `names` (class name only).
    #[arg(long, default_value = "full")]
    pub format: String,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Batch size used to report the training batch layout.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct VhsArgs {
    /// Vertebral heart scale score.
    pub score: f64,
}

/// Config file contents. Every field is optional; absent fields keep their
/// defaults. A `run.json` written by `train` is a valid config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub adam: Option<AdamConfig>,
    pub seed: Option<u64>,
    pub strict: Option<bool>,
    pub record_timing: Option<bool>,
    pub model: Option<CardioNetConfig>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Usage(format!(
                "--config: file {} does not exist",
                path.display()
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map(Self::load)
            .transpose()
            .map(Option::unwrap_or_default)
    }
}

/// Dataset root from `--data`, then the config file, then `CARDIONET_DATA`.
fn resolve_data_root(flag: Option<&Path>, file: &ConfigFile) -> Result<PathBuf> {
    let root = flag
        .map(Path::to_path_buf)
        .or_else(|| file.data.clone())
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .filter(|p| !p.as_os_str().is_empty())
        .ok_or_else(|| {
            Error::Usage(format!(
                "no dataset root given: pass --data <DIR> or set {DATA_ENV}"
            ))
        })?;
    if !root.is_dir() {
        return Err(Error::Usage(format!(
            "--data: dataset root {} is not a directory",
            root.display()
        )));
    }
    Ok(root)
}

/// Merge defaults, config file and flags (in increasing precedence).
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let file = ConfigFile::load_opt(args.data.config.as_deref())?;
    let mut cfg = TrainConfig {
        data_root: resolve_data_root(args.data.data.as_deref(), &file)?,
        ..TrainConfig::default()
    };
    if let Some(v) = file.out {
        cfg.out_dir = v;
    }
    if let Some(v) = file.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = file.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = file.adam {
        cfg.adam = v;
    }
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = file.strict {
        cfg.strict = v;
    }
    if let Some(v) = file.record_timing {
        cfg.record_timing = v;
    }
    if let Some(v) = file.model {
        cfg.model = v;
    }

    if let Some(v) = &args.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.adam.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.strict |= args.data.strict;
    cfg.record_timing |= args.timing;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<SplitRole> {
    s.parse()
}

fn output_dir(out: Option<&Path>, checkpoint: &Path) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Usage(format!(
            "--checkpoint: file {} does not exist",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(path)?;
    let m = &ckpt.metadata;
    let loss = |l: Option<f64>| l.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    info!(
        "checkpoint {}: epoch {}, train loss {}, valid loss {}, seed {}",
        path.display(),
        m.epoch,
        loss(m.train_loss),
        loss(m.valid_loss),
        m.seed
    );
    Ok(ckpt)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(args)?;
    info!(
        "training for {} epochs, batch size {}, lr {}, seed {}",
        cfg.epochs, cfg.batch_size, cfg.adam.learning_rate, cfg.seed
    );
    let epochs = cfg.epochs;
    println!("epoch,train_loss,valid_loss,seconds");
    let outcome = trainer::train(&cfg, |r| {
        println!(
            "{}/{epochs},{:.6},{:.6},{:.2}",
            r.epoch, r.train_loss, r.valid_loss, r.seconds
        );
    })?;
    let best = &outcome.best.metadata;
    println!(
        "best epoch {} (valid loss {:.6}); wrote {}, {} and {} to {}",
        best.epoch,
        best.valid_loss.unwrap_or(f64::NAN),
        BEST_CHECKPOINT,
        HISTORY_CSV,
        RUN_JSON,
        cfg.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluationReport<'a> {
    checkpoint: &'a Path,
    split: SplitRole,
    loss: f64,
    metrics: &'a MetricsReport,
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let role = parse_split(&args.split)?;
    if !role.is_labeled() {
        return Err(Error::Usage(format!(
            "the {role} split is unlabeled; use `cardionet predict` to export predictions"
        )));
    }
    let file = ConfigFile::load_opt(args.data.config.as_deref())?;
    let root = resolve_data_root(args.data.data.as_deref(), &file)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let opts = LoadOptions {
        image_size: ckpt.metadata.config.input_size,
        strict: args.data.strict || file.strict.unwrap_or(false),
    };
    let split = load_split(&root, role, &opts)?;
    let (loss, metrics) = trainer::evaluate_split(&ckpt, &split)?;
    println!("{role} split: {} images, mean loss {loss:.6}", split.len());
    print!("{}", metrics.to_table());

    let dir = output_dir(args.out.as_deref(), &args.checkpoint);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("metrics_{}.json", role.dir_name()));
    let report = EvaluationReport {
        checkpoint: &args.checkpoint,
        split: role,
        loss,
        metrics: &metrics,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let role = parse_split(&args.split)?;
    let format: CsvFormat = args.format.parse()?;
    let file = ConfigFile::load_opt(args.data.config.as_deref())?;
    let root = resolve_data_root(args.data.data.as_deref(), &file)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let opts = LoadOptions {
        image_size: ckpt.metadata.config.input_size,
        strict: args.data.strict || file.strict.unwrap_or(false),
    };
    let split = load_split(&root, role, &opts)?;
    let path = output_dir(args.out.as_deref(), &args.checkpoint).join(PREDICTIONS_CSV);
    let summary = predict_split(&ckpt, &split, &path, format)?;
    println!(
        "checkpoint epoch {}, valid loss {}",
        ckpt.metadata.epoch,
        ckpt.metadata
            .valid_loss
            .map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
    );
    print!("{}", summary.to_table());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let file = ConfigFile::load_opt(args.data.config.as_deref())?;
    let root = resolve_data_root(args.data.data.as_deref(), &file)?;
    let opts = LoadOptions {
        image_size: file
            .model
            .as_ref()
            .map_or(DEFAULT_IMAGE_SIZE, |m| m.input_size),
        strict: args.data.strict || file.strict.unwrap_or(false),
    };
    let batch_size = args
        .batch_size
        .or(file.batch_size)
        .unwrap_or(TrainConfig::default().batch_size);
    println!(
        "{:<8}{:>8}{:>8}{:>8}{:>8}",
        "split", "Large", "Normal", "Small", "total"
    );
    let mut train_len = None;
    for role in SplitRole::ALL {
        let split = load_split(&root, role, &opts)?;
        if split.is_labeled() {
            let [l, n, s] = split.class_counts;
            println!("{:<8}{l:>8}{n:>8}{s:>8}{:>8}", role.dir_name(), split.len());
        } else {
            println!(
                "{:<8}{:>8}{:>8}{:>8}{:>8}",
                role.dir_name(),
                "-",
                "-",
                "-",
                split.len()
            );
        }
        if !split.skipped.is_empty() {
            println!("  ({} files skipped)", split.skipped.len());
        }
        if role == SplitRole::Train {
            train_len = Some(split.len());
        }
    }
    if let Some(n) = train_len.filter(|&n| n > 0) {
        let batches = batch_indices(n, batch_size, 0, false)?;
        let last = batches.last().map_or(0, Vec::len);
        println!(
            "train batches at size {batch_size}: {}, final batch {last}",
            batches.len()
        );
    }
    Ok(())
}

fn cmd_vhs(args: &VhsArgs) -> Result<()> {
    let score = VhsScore::new(args.score)?;
    println!("{}", vhs_to_class(score));
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    if err.is_usage() || matches!(err, Error::Domain { .. } | Error::MissingPath(_)) {
        EXIT_USAGE
    } else {
        EXIT_FAILURE
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::InspectData(a) => cmd_inspect(a),
        Command::Vhs(a) => cmd_vhs(a),
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_args(extra: &[&str]) -> TrainArgs {
        let mut argv = vec!["cardionet", "train"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Train(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn defaults_resolve_to_50_epochs_batch_32_lr_0_001() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_str().unwrap();
        let cfg = resolve_train_config(&train_args(&["--data", root])).unwrap();
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.adam.learning_rate, 0.001);
        assert!(!cfg.record_timing);
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.json");
        fs::write(
            &cfg_path,
            r#"{"epochs": 7, "seed": 3, "adam": {"learning_rate": 0.01}}"#,
        )
        .unwrap();
        let root = dir.path().to_str().unwrap();
        let path = cfg_path.to_str().unwrap();
        let cfg = resolve_train_config(&train_args(&["--data", root, "--config", path])).unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.adam.learning_rate), (7, 3, 0.01));
        assert_eq!(cfg.adam.beta2, 0.999);

        let cfg = resolve_train_config(&train_args(&[
            "--data", root, "--config", path, "--epochs", "2", "--lr", "0.5",
        ]))
        .unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.adam.learning_rate), (2, 3, 0.5));
    }

    #[test]
    fn run_json_is_a_valid_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_str().unwrap();
        let cfg = resolve_train_config(&train_args(&["--data", root, "--seed", "9"])).unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let again =
            resolve_train_config(&train_args(&["--config", path.to_str().unwrap()])).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_config_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"epoch": 7}"#).unwrap();
        let root = dir.path().to_str().unwrap();
        let err = resolve_train_config(&train_args(&[
            "--data",
            root,
            "--config",
            path.to_str().unwrap(),
        ]))
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(exit_code(&err), EXIT_USAGE);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["cardionet", "vhs", "9.0"]), EXIT_OK);
        assert_eq!(run(["cardionet", "vhs", "--", "-1"]), EXIT_USAGE);
        assert_eq!(run(["cardionet", "bogus"]), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_FAILURE);
    }
}
