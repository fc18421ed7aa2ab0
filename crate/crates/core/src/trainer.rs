//! Training loop with validation-driven best-model selection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{batch_indices, load_split, DatasetSplit, LoadOptions, SplitRole};
use crate::error::{Error, Result};
use crate::loss::{argmax_rows, softmax_cross_entropy};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{CardioNet, CardioNetConfig, Mode};
use crate::optim::{Adam, AdamConfig};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_CSV: &str = "history.csv";
pub const RUN_JSON: &str = "run.json";
pub const HISTORY_HEADER: &str = "epoch,train_loss,valid_loss,seconds";

/// Fully resolved run configuration. Serialized as `run.json`, which can be
/// fed back through `--config` to repeat the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "data")]
    pub data_root: PathBuf,
    #[serde(rename = "out")]
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub strict: bool,
    /// Write wall-clock epoch durations into `history.csv`. Off by default so
    /// that repeated runs produce identical files.
    pub record_timing: bool,
    pub model: CardioNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::new(),
            out_dir: PathBuf::from("runs/latest"),
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            strict: false,
            record_timing: false,
            model: CardioNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.adam.validate()?;
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Per-sample mean cross-entropy over the epoch's batches.
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss (earliest on ties).
    pub best: Checkpoint,
    /// Weights after the final epoch.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub optimizer_steps: u64,
}

fn check_labeled(split: &DatasetSplit, what: &str, image_size: usize) -> Result<()> {
    if split.is_empty() {
        return Err(Error::Data(format!("{what} split is empty")));
    }
    if !split.is_labeled() {
        return Err(Error::Usage(format!(
            "{what} split is unlabeled; use `predict` for the test split"
        )));
    }
    match split.image_size() {
        Some(s) if s != image_size => Err(Error::Compatibility(format!(
            "{what} images are {s}x{s}, model expects {image_size}x{image_size}"
        ))),
        _ => Ok(()),
    }
}

/// Mean loss and metrics of `model` over a labeled split, evaluated in
/// unshuffled batches without recording backward state.
pub fn evaluate_model(
    model: &CardioNet<f32>,
    split: &DatasetSplit,
    batch_size: usize,
) -> Result<(f64, MetricsReport)> {
    check_labeled(split, &split.role.to_string(), model.config().input_size)?;
    let mut total = 0.0f64;
    let mut predicted = Vec::with_capacity(split.len());
    let mut truth = Vec::with_capacity(split.len());
    for idx in batch_indices(split.len(), batch_size, 0, false)? {
        let batch = split.batch(&idx)?;
        let targets = batch.targets.expect("labeled split");
        let logits = model.forward_eval(&batch.images)?;
        let (loss, _) = softmax_cross_entropy(&logits, &targets)?;
        total += f64::from(loss) * targets.len() as f64;
        predicted.extend(argmax_rows(&logits));
        truth.extend(targets);
    }
    let report = compute_metrics(&predicted, &truth)?;
    Ok((total / split.len() as f64, report))
}

const EVAL_BATCH: usize = 32;

/// Mean per-sample cross-entropy and metrics of a checkpoint on a labeled
/// split.
pub fn evaluate_split(ckpt: &Checkpoint, split: &DatasetSplit) -> Result<(f64, MetricsReport)> {
    if !split.is_labeled() {
        return Err(Error::Usage(format!(
            "the {} split is unlabeled; use `predict` to export predictions instead",
            split.role
        )));
    }
    evaluate_model(&ckpt.to_model()?, split, EVAL_BATCH)
}

/// Run the training loop on in-memory splits.
///
/// `validate` computes the validation loss at the end of every epoch; the
/// default is [`evaluate_model`]'s mean loss. `on_epoch` sees each record as
/// it completes.
pub fn fit<V, O>(
    cfg: &TrainConfig,
    train: &DatasetSplit,
    valid: &DatasetSplit,
    mut validate: V,
    mut on_epoch: O,
) -> Result<TrainOutcome>
where
    V: FnMut(usize, &CardioNet<f32>, &DatasetSplit) -> Result<f64>,
    O: FnMut(&EpochRecord),
{
    cfg.validate()?;
    check_labeled(train, "training", cfg.model.input_size)?;
    check_labeled(valid, "validation", cfg.model.input_size)?;

    let mut net = CardioNet::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam)?;
    let mut shuffle_seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_seeds.set_stream(1);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0f64;
        let batches = batch_indices(train.len(), cfg.batch_size, shuffle_seeds.next_u64(), true)?;
        for (b, idx) in batches.iter().enumerate() {
            let batch = train.batch(idx)?;
            let targets = batch.targets.expect("labeled split");
            let (logits, ctx) = net.forward(&batch.images, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    location: format!("training batch {}", b + 1),
                    value: loss.into(),
                });
            }
            let grads = net.backward(&ctx, &grad)?;
            adam.step(net.params_mut(), &grads)?;
            loss_sum += f64::from(loss) * targets.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let valid_loss = validate(epoch, &net, valid)?;
        if !valid_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                location: "validation".into(),
                value: valid_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        let improved = best
            .as_ref()
            .and_then(|b| b.metadata.valid_loss)
            .is_none_or(|prev| valid_loss < prev);
        if improved {
            best = Some(Checkpoint::from_model(
                &net,
                epoch,
                Some(train_loss),
                Some(valid_loss),
                cfg.seed,
            ));
        }
        history.push(record);
    }
    let last_record = history.last().expect("at least one epoch");
    let last = Checkpoint::from_model(
        &net,
        last_record.epoch,
        Some(last_record.train_loss),
        Some(last_record.valid_loss),
        cfg.seed,
    );
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        last,
        history,
        optimizer_steps: adam.timestep(),
    })
}

/// Load the train and valid splits from `cfg.data_root`, train, and write
/// `best.ckpt`, `history.csv` and `run.json` into `cfg.out_dir`.
pub fn train(cfg: &TrainConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let opts = LoadOptions {
        image_size: cfg.model.input_size,
        strict: cfg.strict,
    };
    let train_split = load_split(&cfg.data_root, SplitRole::Train, &opts)?;
    let valid_split = load_split(&cfg.data_root, SplitRole::Valid, &opts)?;
    info!("train: {}", train_split.summary());
    info!("valid: {}", valid_split.summary());
    let outcome = fit(
        cfg,
        &train_split,
        &valid_split,
        |_, net, split| evaluate_model(net, split, cfg.batch_size).map(|(loss, _)| loss),
        on_epoch,
    )?;
    write_outputs(cfg, &outcome)?;
    Ok(outcome)
}

pub fn history_csv(history: &[EpochRecord], record_timing: bool) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let seconds = if record_timing {
            format!("{:.3}", r.seconds)
        } else {
            String::new()
        };
        writeln!(
            out,
            "{},{},{},{seconds}",
            r.epoch, r.train_loss, r.valid_loss
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_outputs(cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.best.save(&dir.join(BEST_CHECKPOINT))?;
    write_file(
        &dir.join(HISTORY_CSV),
        history_csv(&outcome.history, cfg.record_timing).as_bytes(),
    )?;
    let mut run = serde_json::to_string_pretty(cfg)?;
    run.push('\n');
    write_file(&dir.join(RUN_JSON), run.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
