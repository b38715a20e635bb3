//! Pretext training: predict which transform produced each image.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Container, Provenance};
use crate::dataset::{epoch_seed, pretext_batches, BuildMethod, Grouping, NormStats, PretextDataset};
use crate::error::{Error, Result};
use crate::geometry::SetName;
use crate::models::{attach_pretext_head, build_backbone, BackboneSpec, Model};
use crate::nn::{softmax_cross_entropy, Optimizer, OptimizerKind, OptimizerSettings, Scalar, Tensor};

/// Probability floor inside the logarithm of [`pretext_loss`].
pub const LOSS_EPS: f64 = 1e-12;

/// Mean negative log-probability of the true transform.
///
/// With all K copies of each source in the batch this equals the per-source
/// average of `-(1/K) Σ_y log p_y`; see [`pretext_loss_grouped`].
pub fn pretext_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    check_probs(probs, labels, k)?;
    let total: f64 = probs
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| -row[y].as_f64().max(LOSS_EPS).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// The per-source form: average over source images of the mean
/// negative log-probability across that source's copies.
pub fn pretext_loss_grouped<T: Scalar>(probs: &Tensor<T>, labels: &[usize], sources: &[usize], k: usize) -> Result<f64> {
    check_probs(probs, labels, k)?;
    if sources.len() != labels.len() {
        return Err(Error::invalid("one source index per sample"));
    }
    let mut per_source: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for ((row, &y), &s) in probs.data().chunks(k).zip(labels).zip(sources) {
        let e = per_source.entry(s).or_default();
        e.0 -= row[y].as_f64().max(LOSS_EPS).ln();
        e.1 += 1;
    }
    let n = per_source.len() as f64;
    Ok(per_source.values().map(|(sum, c)| sum / *c as f64).sum::<f64>() / n)
}

fn check_probs<T: Scalar>(probs: &Tensor<T>, labels: &[usize], k: usize) -> Result<()> {
    if probs.shape().len() != 2 || probs.dim(1) != k || probs.dim(0) != labels.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "expected a [{}, {k}] probability batch, got {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    for (i, row) in probs.data().chunks(k).enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("row {i} sums to {sum}, not 1")));
        }
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {y} out of range for K = {k}")));
    }
    Ok(())
}

/// Piecewise-constant step decay: `base / factor^n` where `n` counts the
/// drop epochs at or before `epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(self.drop_factor >= 1.0 && self.drop_factor.is_finite()) {
            return Err(Error::config(format!("lr drop factor must be >= 1, got {}", self.drop_factor)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lr drop epochs must be strictly increasing"));
        }
        if let Some(&last) = self.drop_epochs.last() {
            if last >= self.epochs {
                return Err(Error::config(format!(
                    "lr drop epoch {last} is not below the epoch count {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::invalid(format!("epoch {epoch} outside 0..{}", self.epochs)));
        }
        let drops = self.drop_epochs.iter().filter(|&&d| d <= epoch).count();
        Ok(self.base_lr / self.drop_factor.powi(drops as i32))
    }
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_drops() -> Vec<usize> {
    vec![30, 60, 80]
}
fn default_factor() -> f64 {
    5.0
}
fn default_epochs() -> usize {
    100
}
fn default_rmsprop() -> OptimizerKind {
    OptimizerKind::Rmsprop
}
fn default_every() -> usize {
    10
}
fn default_copies() -> usize {
    1
}
fn default_grouping() -> Grouping {
    Grouping::Grouped
}
fn default_method() -> BuildMethod {
    BuildMethod::Separate
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextTrainConfig {
    pub transform_set: SetName,
    #[serde(flatten)]
    pub backbone: BackboneSpec,
    #[serde(default = "default_method")]
    pub build_method: BuildMethod,
    /// Copies per source image for the random build method.
    #[serde(default = "default_copies")]
    pub copies_per_source: usize,
    #[serde(default = "default_grouping")]
    pub grouping: Grouping,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_rmsprop")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_drops")]
    pub lr_drop_epochs: Vec<usize>,
    #[serde(default = "default_factor")]
    pub lr_drop_factor: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PretextTrainConfig {
    /// The standard protocol for one transform set and backbone.
    pub fn new(transform_set: SetName, backbone: BackboneSpec) -> Self {
        Self {
            transform_set,
            backbone,
            build_method: default_method(),
            copies_per_source: default_copies(),
            grouping: default_grouping(),
            batch_size: default_batch(),
            optimizer: default_rmsprop(),
            base_lr: default_lr(),
            lr_drop_epochs: default_drops(),
            lr_drop_factor: default_factor(),
            epochs: default_epochs(),
            weight_decay: 0.0,
            checkpoint_every: default_every(),
            seed: 0,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            drop_epochs: self.lr_drop_epochs.clone(),
            drop_factor: self.lr_drop_factor,
            epochs: self.epochs,
        }
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            weight_decay: self.weight_decay,
            ..OptimizerSettings::standard(self.optimizer)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        let group = match self.build_method {
            BuildMethod::Separate => self.transform_set.expected_k(),
            BuildMethod::Random => Some(self.copies_per_source),
        };
        if let (Grouping::Grouped, Some(group)) = (self.grouping, group) {
            if group == 0 || self.batch_size % group != 0 {
                return Err(Error::config(format!(
                    "grouped batching needs the batch size ({}) to be a multiple of {group}",
                    self.batch_size
                )));
            }
        }
        Ok(())
    }
}

/// The learning rate of the standard pretext protocol at `epoch`.
pub fn lr_schedule(epoch: usize) -> Result<f64> {
    PretextTrainConfig::new(SetName::Rot2, BackboneSpec::new(crate::models::Arch::Vgg16, 2)?)
        .schedule()
        .lr(epoch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let epochs = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        Ok(Self { epochs })
    }

    /// Every field except wall-clock time.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.epochs.len() == other.epochs.len()
            && self
                .epochs
                .iter()
                .zip(&other.epochs)
                .all(|(a, b)| a.epoch == b.epoch && a.loss == b.loss && a.accuracy == b.accuracy && a.lr == b.lr)
    }
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}

/// Compute device requested through `--device` or `TSSL_DEVICE`.
///
/// Only the CPU engine exists; any other request falls back to it and the
/// returned note says so.
pub fn resolve_device(requested: Option<&str>) -> (String, Option<String>) {
    let req = requested
        .map(str::to_string)
        .or_else(|| std::env::var("TSSL_DEVICE").ok())
        .unwrap_or_else(|| "cpu".into());
    if req.eq_ignore_ascii_case("cpu") {
        ("cpu".into(), None)
    } else {
        ("cpu".into(), Some(format!("device '{req}' is not available, using cpu")))
    }
}

/// Where and how a training run persists its progress.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for history, intermediate and final checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Continue from the newest intermediate checkpoint in `out_dir`.
    pub resume: bool,
    pub config_hash: String,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

pub struct PretextOutcome {
    pub model: Model<f32>,
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    /// Accuracy on the held-out transformed split, when one was given.
    pub holdout_accuracy: Option<f64>,
    pub first_batch_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    epochs_completed: usize,
    optimizer_steps: u64,
    history: TrainHistory,
    first_batch_loss: Option<f64>,
}

const STATE_KIND: &str = "trainer_state";
pub const FINAL_CHECKPOINT: &str = "pretext.tssl";
pub const HISTORY_FILE: &str = "history.csv";

fn intermediate_paths(dir: &Path, epoch: usize) -> (PathBuf, PathBuf) {
    let d = dir.join("checkpoints");
    (
        d.join(format!("epoch-{epoch:03}.tssl")),
        d.join(format!("epoch-{epoch:03}.state.tssl")),
    )
}

fn latest_intermediate(dir: &Path) -> Option<usize> {
    let entries = fs::read_dir(dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let epoch = name.strip_prefix("epoch-")?.strip_suffix(".state.tssl")?.parse().ok()?;
            intermediate_paths(dir, epoch).0.exists().then_some(epoch)
        })
        .max()
}

/// Top-1 transform accuracy of `model` on `data`, in inference mode.
pub fn pretext_accuracy(model: &mut Model<f32>, data: &PretextDataset, norm: &NormStats, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, labels) = data.batch_tensor::<f32>(chunk, norm)?;
        let pred = model.forward(&x, false).argmax_rows();
        correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// One forward/backward pass. Returns the loss and the number of correct
/// predictions; gradients are left in the model.
pub fn pretext_step<T: Scalar>(model: &mut Model<T>, x: &Tensor<T>, labels: &[usize]) -> (f64, usize) {
    model.zero_grad();
    let logits = model.forward(x, true);
    if !logits.all_finite() {
        return (f64::NAN, 0);
    }
    let pred = logits.argmax_rows();
    let (loss, grad) = softmax_cross_entropy(&logits, labels);
    model.backward(&grad);
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    (loss, correct)
}

/// Trains a backbone plus pretext head on `data` following `config`.
pub fn train_pretext(
    config: &PretextTrainConfig,
    data: &PretextDataset,
    holdout: Option<&PretextDataset>,
    opts: &TrainOptions,
) -> Result<PretextOutcome> {
    config.validate()?;
    if data.set().name() != config.transform_set {
        return Err(Error::config(format!(
            "dataset uses transform set {}, config asks for {}",
            data.set().name(),
            config.transform_set
        )));
    }
    if data.method() != config.build_method {
        return Err(Error::config("dataset build method differs from the config"));
    }
    let k = data.set().k();
    let schedule = config.schedule();
    let norm = NormStats::compute(data.sources().iter().map(|s| &s.image));
    let provenance = |epochs_completed| Provenance {
        transform_set: config.transform_set,
        epochs_completed,
        total_epochs: config.epochs,
        seed: config.seed,
        config_hash: opts.config_hash.clone(),
        producer: concat!("tssl ", env!("CARGO_PKG_VERSION")).into(),
    };

    let mut model = attach_pretext_head(build_backbone::<f32>(config.backbone, config.seed)?, k, config.seed ^ 0x5eed)?;
    let mut optimizer = Optimizer::<f32>::new(config.optimizer_settings());
    let mut history = TrainHistory::default();
    let mut first_batch_loss = None;
    let mut start_epoch = 0;

    if let (Some(dir), true) = (&opts.out_dir, opts.resume) {
        if let Some(epoch) = latest_intermediate(dir) {
            let (ck_path, state_path) = intermediate_paths(dir, epoch);
            let ck = Checkpoint::load(&ck_path)?;
            if ck.meta.spec != config.backbone || ck.meta.provenance.config_hash != opts.config_hash {
                return Err(Error::config(format!(
                    "{} was written by a different configuration",
                    ck_path.display()
                )));
            }
            model = ck.restore_model(&ck_path)?;
            let state = Container::load(&state_path)?;
            let meta: TrainerState = state.meta_as(&state_path)?;
            optimizer.restore(meta.optimizer_steps, state.tensors);
            history = meta.history;
            first_batch_loss = meta.first_batch_loss;
            start_epoch = meta.epochs_completed;
        }
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in start_epoch..config.epochs {
        let lr = schedule.lr(epoch)?;
        let started = Instant::now();
        let batches = pretext_batches(data, config.batch_size, epoch_seed(config.seed, epoch), config.grouping)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, indices) in batches.iter().enumerate() {
            let (x, labels) = data.batch_tensor::<f32>(indices, &norm)?;
            let (loss, ok) = pretext_step(&mut model, &x, &labels);
            if !loss.is_finite() {
                return Err(Error::TrainingAbort {
                    epoch,
                    batch: b,
                    lr,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            if first_batch_loss.is_none() {
                first_batch_loss = Some(loss);
            }
            optimizer.step(&mut model.trainable_slots(), lr);
            loss_sum += loss * labels.len() as f64;
            correct += ok;
            seen += labels.len();
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "pretext epoch {:>3}/{}  loss {:.4}  acc {:.4}  lr {:.1e}  {:.1}s",
                epoch + 1,
                config.epochs,
                record.loss,
                record.accuracy,
                record.lr,
                record.seconds
            );
        }
        history.epochs.push(record);
        let done = epoch + 1;
        if let Some(dir) = &opts.out_dir {
            history.write_csv(dir.join(HISTORY_FILE))?;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.epochs {
                let (ck_path, state_path) = intermediate_paths(dir, done);
                Checkpoint::from_model(&mut model, norm, provenance(done)).save(&ck_path)?;
                let state = TrainerState {
                    epochs_completed: done,
                    optimizer_steps: optimizer.steps(),
                    history: history.clone(),
                    first_batch_loss,
                };
                let tensors = optimizer.state_tensors().into_iter().map(|(k, v)| (k, v.clone())).collect();
                Container::new(STATE_KIND, &state, tensors)?.save(&state_path)?;
            }
        }
    }

    let checkpoint = Checkpoint::from_model(&mut model, norm, provenance(config.epochs));
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(dir.join(FINAL_CHECKPOINT))?;
    }
    let holdout_accuracy = holdout
        .map(|h| pretext_accuracy(&mut model, h, &norm, config.batch_size))
        .transpose()?;
    Ok(PretextOutcome {
        model,
        checkpoint,
        history,
        holdout_accuracy,
        first_batch_loss,
    })
}
