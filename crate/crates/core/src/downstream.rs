//! Supervised CIFAR-10 recognition on top of a (pretext-trained or random)
//! backbone, with the backbone frozen or fine-tuned.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{collect_tensors, Checkpoint, Container, Provenance};
use crate::dataset::{epoch_seed, CifarSplits, LabeledImage, NormStats, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::{rotate_degrees, scale_about_center, scale_brightness, translate, Image, SetName};
use crate::models::{attach_probe_head, build_backbone, Backbone, BackboneSpec, Model};
use crate::nn::{softmax_cross_entropy, Optimizer, OptimizerKind, OptimizerSettings, Scalar, Tensor};
use crate::pretext::{csv_io, LrSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Frozen,
    Unfrozen,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Unfrozen, Mode::Frozen];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Frozen => "frozen",
            Mode::Unfrozen => "unfrozen",
        }
    }

    /// Column heading used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Frozen => "Frozen",
            Mode::Unfrozen => "Unfrozen",
        }
    }

    /// Legend text used in accuracy curves.
    pub fn curve_label(self) -> &'static str {
        match self {
            Mode::Frozen => "feature extracting",
            Mode::Unfrozen => "fine tuning",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" | "feature-extracting" => Ok(Mode::Frozen),
            "unfrozen" | "fine-tuning" => Ok(Mode::Unfrozen),
            _ => Err(Error::invalid(format!("unknown mode '{s}' (expected frozen or unfrozen)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentLevel {
    None,
    Weak,
    Strong,
}

impl AugmentLevel {
    pub const ALL: [AugmentLevel; 3] = [AugmentLevel::None, AugmentLevel::Weak, AugmentLevel::Strong];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentLevel::None => "none",
            AugmentLevel::Weak => "weak",
            AugmentLevel::Strong => "strong",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AugmentLevel::None => "No augmentation",
            AugmentLevel::Weak => "Weak augmentation",
            AugmentLevel::Strong => "Strong augmentation",
        }
    }
}

impl fmt::Display for AugmentLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "no" => Ok(AugmentLevel::None),
            "weak" | "less" => Ok(AugmentLevel::Weak),
            "strong" | "more" => Ok(AugmentLevel::Strong),
            _ => Err(Error::invalid(format!("unknown augmentation level '{s}' (expected none, weak or strong)"))),
        }
    }
}

/// One stochastic operator and the range its parameter is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Zoom factor `z` in the open interval `(min, max)`; `z < 1` magnifies
    /// the centre by `1 / z`.
    Zoom { min: f64, max: f64 },
    /// Horizontal shift in whole pixels, inclusive.
    WidthShift { max_px: i32 },
    /// Vertical shift of up to `fraction * height` pixels, inclusive.
    HeightShift { fraction: f64 },
    HorizontalFlip { probability: f64 },
    /// Rotation in degrees, inclusive on both ends.
    Rotation { max_degrees: f64 },
    /// Multiplicative brightness in the open interval `(min, max)`.
    Brightness { min: f64, max: f64 },
}

/// Concrete parameters drawn for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampledOp {
    Zoom(f64),
    WidthShift(i32),
    HeightShift(i32),
    HorizontalFlip(bool),
    Rotation(f64),
    Brightness(f64),
}

fn open_interval(rng: &mut ChaCha8Rng, min: f64, max: f64) -> f64 {
    loop {
        let v = rng.random_range(min..max);
        if v > min {
            return v;
        }
    }
}

impl AugmentOp {
    pub fn sample(&self, rng: &mut ChaCha8Rng, height: usize) -> SampledOp {
        match *self {
            AugmentOp::Zoom { min, max } => SampledOp::Zoom(open_interval(rng, min, max)),
            AugmentOp::WidthShift { max_px } => SampledOp::WidthShift(rng.random_range(-max_px..=max_px)),
            AugmentOp::HeightShift { fraction } => {
                let m = (fraction * height as f64).floor() as i32;
                SampledOp::HeightShift(rng.random_range(-m..=m))
            }
            AugmentOp::HorizontalFlip { probability } => SampledOp::HorizontalFlip(rng.random_bool(probability)),
            AugmentOp::Rotation { max_degrees } => SampledOp::Rotation(rng.random_range(-max_degrees..=max_degrees)),
            AugmentOp::Brightness { min, max } => SampledOp::Brightness(open_interval(rng, min, max)),
        }
    }

    /// Whether `s` lies inside this operator's declared range.
    pub fn admits(&self, s: &SampledOp, height: usize) -> bool {
        match (*self, *s) {
            (AugmentOp::Zoom { min, max }, SampledOp::Zoom(z)) => z > min && z < max,
            (AugmentOp::WidthShift { max_px }, SampledOp::WidthShift(d)) => d.abs() <= max_px,
            (AugmentOp::HeightShift { fraction }, SampledOp::HeightShift(d)) => {
                d.abs() as f64 <= fraction * height as f64
            }
            (AugmentOp::HorizontalFlip { .. }, SampledOp::HorizontalFlip(_)) => true,
            (AugmentOp::Rotation { max_degrees }, SampledOp::Rotation(a)) => a.abs() <= max_degrees,
            (AugmentOp::Brightness { min, max }, SampledOp::Brightness(b)) => b > min && b < max,
            _ => false,
        }
    }
}

/// Applies already-sampled operators in order.
pub fn apply_sampled(img: &Image, ops: &[SampledOp]) -> Result<Image> {
    let mut out = img.clone();
    for op in ops {
        out = match *op {
            SampledOp::Zoom(z) => scale_about_center(&out, 1.0 / z)?,
            SampledOp::WidthShift(d) => translate(&out, d, 0)?,
            SampledOp::HeightShift(d) => translate(&out, 0, d)?,
            SampledOp::HorizontalFlip(true) => out.flip_horizontal(),
            SampledOp::HorizontalFlip(false) => out,
            SampledOp::Rotation(a) => rotate_degrees(&out, a, 0)?,
            SampledOp::Brightness(b) => scale_brightness(&out, b),
        };
    }
    Ok(out)
}

/// Ordered stochastic operators applied to training images.
///
/// Every call to [`AugmentationPolicy::apply`] bumps a shared counter so
/// tests can confirm that evaluation never goes through the policy.
#[derive(Clone, Debug)]
pub struct AugmentationPolicy {
    level: AugmentLevel,
    ops: Vec<AugmentOp>,
    invocations: Arc<AtomicUsize>,
}

/// The operator list for `level`.
///
/// Weak: zoom in (0.5, 1), width shift within ±2 px, height shift within
/// ±0.1·H, horizontal flip with probability 0.5. Strong adds rotation within
/// ±45° and brightness in (0.5, 1).
pub fn augmentation_policy(level: AugmentLevel) -> AugmentationPolicy {
    let weak = [
        AugmentOp::Zoom { min: 0.5, max: 1.0 },
        AugmentOp::Rotation { max_degrees: 45.0 },
        AugmentOp::WidthShift { max_px: 2 },
        AugmentOp::HeightShift { fraction: 0.1 },
        AugmentOp::HorizontalFlip { probability: 0.5 },
        AugmentOp::Brightness { min: 0.5, max: 1.0 },
    ];
    let ops = match level {
        AugmentLevel::None => Vec::new(),
        AugmentLevel::Weak => weak
            .into_iter()
            .filter(|op| !matches!(op, AugmentOp::Rotation { .. } | AugmentOp::Brightness { .. }))
            .collect(),
        AugmentLevel::Strong => weak.to_vec(),
    };
    AugmentationPolicy {
        level,
        ops,
        invocations: Arc::new(AtomicUsize::new(0)),
    }
}

impl AugmentationPolicy {
    pub fn level(&self) -> AugmentLevel {
        self.level
    }

    pub fn ops(&self) -> &[AugmentOp] {
        &self.ops
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, height: usize) -> Vec<SampledOp> {
        self.ops.iter().map(|op| op.sample(rng, height)).collect()
    }

    pub fn apply(&self, img: &Image, rng: &mut ChaCha8Rng) -> Result<Image> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        if self.ops.is_empty() {
            return Ok(img.clone());
        }
        let sampled = self.sample(rng, img.height());
        apply_sampled(img, &sampled)
    }

    /// Number of images passed through [`AugmentationPolicy::apply`] so far.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }
}

/// Anything that labels a batch of images with one of ten classes.
pub trait Classify {
    fn predict(&mut self, images: &[&Image]) -> Result<Vec<usize>>;
}

/// Adapter running a probe model in inference mode.
pub struct ModelClassifier<'a> {
    pub model: &'a mut Model<f32>,
    pub norm: NormStats,
}

impl Classify for ModelClassifier<'_> {
    fn predict(&mut self, images: &[&Image]) -> Result<Vec<usize>> {
        let x = self.norm.to_tensor::<f32>(images);
        Ok(self.model.forward(&x, false).argmax_rows())
    }
}

const EVAL_BATCH: usize = 256;

/// Top-1 accuracy of `model` on `test`, without augmentation.
pub fn evaluate(model: &mut dyn Classify, test: &[LabeledImage]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test set"));
    }
    let mut correct = 0usize;
    for chunk in test.chunks(EVAL_BATCH) {
        let refs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let pred = model.predict(&refs)?;
        correct += pred
            .iter()
            .zip(chunk)
            .filter(|(p, s)| **p == s.class_label as usize)
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// An optimizer paired with its step-decay schedule.
pub struct ScheduledOptimizer<T> {
    pub optimizer: Optimizer<T>,
    pub schedule: LrSchedule,
}

/// Builds SGD (momentum 0.9), RMSprop (rho 0.9) or Adam (0.9, 0.999) at
/// base rate `lr`, dropping by `drop_factor` at each of `drop_epochs`.
pub fn optimizer_factory<T: Scalar>(
    kind: &str,
    lr: f64,
    drop_epochs: &[usize],
    drop_factor: f64,
    epochs: usize,
) -> Result<ScheduledOptimizer<T>> {
    let kind: OptimizerKind = kind.parse().map_err(Error::InvalidArgument)?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    let schedule = LrSchedule {
        base_lr: lr,
        drop_epochs: drop_epochs.to_vec(),
        drop_factor,
        epochs,
    };
    schedule.validate()?;
    Ok(ScheduledOptimizer {
        optimizer: Optimizer::new(OptimizerSettings::standard(kind)),
        schedule,
    })
}

/// Marker for the random-initialization control in place of a checkpoint.
pub const RANDOM_INIT: &str = "random-init";

fn d_epochs() -> usize {
    50
}
fn d_batch() -> usize {
    128
}
fn d_lr() -> f64 {
    1e-3
}
fn d_drops() -> Vec<usize> {
    vec![15, 30, 40]
}
fn d_factor() -> f64 {
    5.0
}
fn d_optimizer() -> OptimizerKind {
    OptimizerKind::Rmsprop
}
fn d_aug() -> AugmentLevel {
    AugmentLevel::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    /// Checkpoint path, or `random-init` for the untrained control.
    pub checkpoint: String,
    pub mode: Mode,
    #[serde(default = "d_aug")]
    pub augmentation: AugmentLevel,
    #[serde(default = "d_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_drops")]
    pub lr_drop_epochs: Vec<usize>,
    #[serde(default = "d_factor")]
    pub lr_drop_factor: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Use only the first N training images (class-interleaved).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl DownstreamConfig {
    pub fn new(checkpoint: impl Into<String>, mode: Mode) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            mode,
            augmentation: d_aug(),
            optimizer: d_optimizer(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            base_lr: d_lr(),
            lr_drop_epochs: d_drops(),
            lr_drop_factor: d_factor(),
            weight_decay: 0.0,
            train_limit: None,
            seed: 0,
        }
    }

    pub fn is_random_init(&self) -> bool {
        self.checkpoint == RANDOM_INIT
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            drop_epochs: self.lr_drop_epochs.clone(),
            drop_factor: self.lr_drop_factor,
            epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.checkpoint.is_empty() {
            return Err(Error::config("checkpoint must be a path or 'random-init'"));
        }
        Ok(())
    }
}

/// Where the backbone weights come from.
pub enum BackboneSource<'a> {
    Pretrained { checkpoint: &'a Checkpoint, path: &'a Path },
    /// Fresh weights for `spec`, seeded from the run seed.
    RandomInit { spec: BackboneSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Outcome of one downstream run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: DownstreamConfig,
    pub config_hash: String,
    pub backbone: BackboneSpec,
    /// Pretext transform set, absent for the random-init control.
    pub transform_set: Option<SetName>,
    pub provenance: Option<Provenance>,
    pub final_test_accuracy: f64,
    pub test_images: usize,
    pub train_images: usize,
    /// SHA-256 of the backbone tensors before and after training.
    pub backbone_sha256_before: String,
    pub backbone_sha256_after: String,
    #[serde(skip)]
    pub curves: Vec<CurvePoint>,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVES_FILE: &str = "curves.csv";

impl RunResult {
    /// Writes `summary.json` and `curves.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let curves = dir.join(CURVES_FILE);
        let mut w = csv::Writer::from_path(&curves).map_err(|e| csv_io(&curves, e))?;
        for p in &self.curves {
            w.serialize(p).map_err(|e| csv_io(&curves, e))?;
        }
        w.flush().map_err(|e| Error::io(&curves, e))?;
        let json = serde_json::to_vec_pretty(self).expect("run result serializes");
        crate::dataset::write_atomic(&dir.join(SUMMARY_FILE), &json)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let summary = dir.join(SUMMARY_FILE);
        let bytes = fs::read(&summary).map_err(|e| Error::io(&summary, e))?;
        let mut result: RunResult = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: summary.clone(),
            reason: e.to_string(),
        })?;
        let curves = dir.join(CURVES_FILE);
        if curves.exists() {
            let mut r = csv::Reader::from_path(&curves).map_err(|e| csv_io(&curves, e))?;
            result.curves = r
                .deserialize()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format {
                    path: curves.clone(),
                    reason: e.to_string(),
                })?;
        }
        Ok(result)
    }
}

/// SHA-256 over the serialized backbone tensors.
pub fn backbone_digest(backbone: &mut Backbone<f32>) -> String {
    let mut slots = Vec::new();
    backbone.visit(&mut slots);
    let bytes = Container::new("backbone", &(), collect_tensors(&slots))
        .expect("unit metadata serializes")
        .to_bytes();
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Default)]
pub struct DownstreamOptions {
    pub config_hash: String,
    pub verbose: bool,
}

pub struct DownstreamOutcome {
    pub result: RunResult,
    pub model: Model<f32>,
    pub norm: NormStats,
    /// The policy used for training images, for invocation accounting.
    pub policy: AugmentationPolicy,
}

const AUGMENT_STREAM: u64 = 0xa11_90e5;
const PROBE_STREAM: u64 = 0x9_0be;

fn abort(epoch: usize, batch: usize, lr: f64, loss: f64) -> Error {
    Error::TrainingAbort {
        epoch,
        batch,
        lr,
        reason: format!("non-finite loss {loss}"),
    }
}

/// Trains a probe head (and, when unfrozen, the backbone) on the training
/// split and tracks accuracy on the test split after every epoch.
pub fn train_downstream(
    config: &DownstreamConfig,
    source: BackboneSource<'_>,
    data: &CifarSplits,
    opts: &DownstreamOptions,
) -> Result<DownstreamOutcome> {
    config.validate()?;
    let train: &[LabeledImage] = match config.train_limit {
        Some(n) => &data.train[..n.min(data.train.len())],
        None => &data.train,
    };
    if train.is_empty() || data.test.is_empty() {
        return Err(Error::invalid("downstream training needs non-empty train and test splits"));
    }
    let (backbone, norm, transform_set, provenance) = match source {
        BackboneSource::Pretrained { checkpoint, path } => (
            checkpoint.restore_backbone(path)?,
            checkpoint.meta.norm,
            Some(checkpoint.meta.provenance.transform_set),
            Some(checkpoint.meta.provenance.clone()),
        ),
        BackboneSource::RandomInit { spec } => (
            build_backbone::<f32>(spec, config.seed)?,
            NormStats::compute(train.iter().map(|s| &s.image)),
            None,
            None,
        ),
    };
    let spec = *backbone.spec();
    let mut model = attach_probe_head(backbone, NUM_CLASSES, config.seed ^ PROBE_STREAM)?;
    model.set_backbone_trainable(config.mode == Mode::Unfrozen);
    let before = backbone_digest(model.backbone_mut());

    let settings = OptimizerSettings {
        weight_decay: config.weight_decay,
        ..OptimizerSettings::standard(config.optimizer)
    };
    let mut optimizer = Optimizer::<f32>::new(settings);
    let schedule = config.schedule();
    let policy = augmentation_policy(config.augmentation);

    // a frozen backbone without augmentation sees each image exactly once
    let cached = (config.mode == Mode::Frozen && policy.is_identity())
        .then(|| -> Result<_> { Ok((feature_matrix(&mut model, train, &norm), feature_matrix(&mut model, &data.test, &norm))) })
        .transpose()?;
    let test_features = if config.mode == Mode::Frozen {
        Some(match &cached {
            Some((_, t)) => t.clone(),
            None => feature_matrix(&mut model, &data.test, &norm),
        })
    } else {
        None
    };

    let labels: Vec<usize> = train.iter().map(|s| s.class_label as usize).collect();
    let mut curves = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = schedule.lr(epoch)?;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch)));
        let mut aug_rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed ^ AUGMENT_STREAM, epoch));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            model.zero_grad();
            let logits = match &cached {
                Some((features, _)) => model.forward_head(&gather_rows(features, batch), true),
                None => {
                    let images = batch
                        .iter()
                        .map(|&i| policy.apply(&train[i].image, &mut aug_rng))
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<&Image> = images.iter().collect();
                    model.forward(&norm.to_tensor(&refs), true)
                }
            };
            if !logits.all_finite() {
                return Err(abort(epoch, b, lr, f64::NAN));
            }
            let (loss, grad) = softmax_cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(abort(epoch, b, lr, loss));
            }
            if cached.is_some() {
                model.backward_head(&grad);
            } else {
                model.backward(&grad);
            }
            optimizer.step(&mut model.trainable_slots(), lr);
            loss_sum += loss * y.len() as f64;
            correct += logits.argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        let test_accuracy = match &test_features {
            Some(f) => head_accuracy(&mut model, f, &data.test),
            None => evaluate(
                &mut ModelClassifier {
                    model: &mut model,
                    norm,
                },
                &data.test,
            )?,
        };
        let point = CurvePoint {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "{} epoch {:>3}/{}  loss {:.4}  train {:.4}  test {:.4}  {:.1}s",
                config.mode,
                epoch + 1,
                config.epochs,
                point.loss,
                point.train_accuracy,
                point.test_accuracy,
                point.seconds
            );
        }
        curves.push(point);
    }

    let after = backbone_digest(model.backbone_mut());
    let result = RunResult {
        config: config.clone(),
        config_hash: opts.config_hash.clone(),
        backbone: spec,
        transform_set,
        provenance,
        final_test_accuracy: curves.last().map_or(0.0, |p| p.test_accuracy),
        test_images: data.test.len(),
        train_images: train.len(),
        backbone_sha256_before: before,
        backbone_sha256_after: after,
        curves,
    };
    Ok(DownstreamOutcome {
        result,
        model,
        norm,
        policy,
    })
}

/// Loads the checkpoint named in `config` (or builds the random-init
/// control for `spec`) and runs [`train_downstream`].
pub fn run_downstream(
    config: &DownstreamConfig,
    random_init_spec: Option<BackboneSpec>,
    data: &CifarSplits,
    opts: &DownstreamOptions,
) -> Result<DownstreamOutcome> {
    if config.is_random_init() {
        let spec = random_init_spec.ok_or_else(|| Error::config("random-init needs a backbone spec"))?;
        train_downstream(config, BackboneSource::RandomInit { spec }, data, opts)
    } else {
        let path = PathBuf::from(&config.checkpoint);
        let checkpoint = Checkpoint::load(&path)?;
        if let Some(spec) = random_init_spec {
            if spec != checkpoint.meta.spec {
                return Err(Error::config(format!(
                    "checkpoint {} holds {}, expected {spec}",
                    path.display(),
                    checkpoint.meta.spec
                )));
            }
        }
        train_downstream(
            config,
            BackboneSource::Pretrained {
                checkpoint: &checkpoint,
                path: &path,
            },
            data,
            opts,
        )
    }
}

fn feature_matrix(model: &mut Model<f32>, images: &[LabeledImage], norm: &NormStats) -> Tensor<f32> {
    let f = model.spec().feature_width();
    let mut data = Vec::with_capacity(images.len() * f);
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        data.extend_from_slice(model.features(&norm.to_tensor(&refs)).data());
    }
    Tensor::from_vec(&[images.len(), f], data)
}

fn gather_rows(m: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let f = m.dim(1);
    let mut data = Vec::with_capacity(rows.len() * f);
    for &r in rows {
        data.extend_from_slice(&m.data()[r * f..(r + 1) * f]);
    }
    Tensor::from_vec(&[rows.len(), f], data)
}

fn head_accuracy(model: &mut Model<f32>, features: &Tensor<f32>, test: &[LabeledImage]) -> f64 {
    let mut correct = 0;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let pred = model.forward_head(&gather_rows(features, chunk), false).argmax_rows();
        correct += pred
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == test[i].class_label as usize)
            .count();
    }
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::synthetic::synthetic_cifar;

    #[test]
    fn none_policy_is_bit_identical() {
        let splits = synthetic_cifar(1, 0, 1);
        let policy = augmentation_policy(AugmentLevel::None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in &splits.train {
            assert_eq!(policy.apply(&s.image, &mut rng).unwrap(), s.image);
        }
        assert_eq!(policy.invocations(), 10);
    }

    #[test]
    fn degenerate_weak_samples_are_identity() {
        let img = synthetic_cifar(1, 0, 2).train.remove(3).image;
        let ops = [
            SampledOp::Zoom(1.0),
            SampledOp::WidthShift(0),
            SampledOp::HeightShift(0),
            SampledOp::HorizontalFlip(false),
        ];
        assert_eq!(apply_sampled(&img, &ops).unwrap(), img);
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for level in AugmentLevel::ALL {
            let policy = augmentation_policy(level);
            for _ in 0..10_000 {
                let s = policy.sample(&mut rng, 32);
                for (op, v) in policy.ops().iter().zip(&s) {
                    assert!(op.admits(v, 32), "{op:?} produced {v:?}");
                    if let SampledOp::HeightShift(d) = v {
                        assert!(d.abs() <= 3);
                    }
                }
            }
        }
        assert_eq!(augmentation_policy(AugmentLevel::Weak).ops().len(), 4);
        assert_eq!(augmentation_policy(AugmentLevel::Strong).ops().len(), 6);
        assert!("medium".parse::<AugmentLevel>().is_err());
    }

    struct Constant(usize);
    impl Classify for Constant {
        fn predict(&mut self, images: &[&Image]) -> Result<Vec<usize>> {
            Ok(vec![self.0; images.len()])
        }
    }

    struct Oracle(HashMap<Vec<u8>, usize>);
    impl Classify for Oracle {
        fn predict(&mut self, images: &[&Image]) -> Result<Vec<usize>> {
            Ok(images.iter().map(|i| self.0[i.data()]).collect())
        }
    }

    #[test]
    fn constant_and_oracle_accuracy() {
        let test = synthetic_cifar(0, 30, 3).test;
        for c in 0..10 {
            assert_eq!(evaluate(&mut Constant(c), &test).unwrap(), 0.1);
        }
        let mut oracle = Oracle(test.iter().map(|s| (s.image.data().to_vec(), s.class_label as usize)).collect());
        assert_eq!(evaluate(&mut oracle, &test).unwrap(), 1.0);
    }

    #[test]
    fn factory_builds_each_kind() {
        for k in ["sgd", "rmsprop", "adam", "Adam"] {
            let o = optimizer_factory::<f32>(k, 1e-3, &[15, 30, 40], 5.0, 50).unwrap();
            assert_eq!(o.schedule.lr(15).unwrap(), 2e-4);
        }
        assert!(matches!(optimizer_factory::<f32>("lbfgs", 1e-3, &[], 5.0, 5), Err(Error::InvalidArgument(_))));
        assert!(optimizer_factory::<f32>("sgd", 0.0, &[], 5.0, 5).is_err());
    }

    fn small_config(mode: Mode) -> DownstreamConfig {
        let mut c = DownstreamConfig::new(RANDOM_INIT, mode);
        c.epochs = 2;
        c.batch_size = 32;
        c.lr_drop_epochs = vec![1];
        c.seed = 4;
        c
    }

    #[test]
    fn frozen_runs_leave_the_backbone_untouched() {
        let data = synthetic_cifar(8, 4, 5);
        let spec: BackboneSpec = "vgg16-2/w16".parse().unwrap();
        for aug in [AugmentLevel::None, AugmentLevel::Strong] {
            let mut c = small_config(Mode::Frozen);
            c.augmentation = aug;
            let out = run_downstream(&c, Some(spec), &data, &DownstreamOptions::default()).unwrap();
            assert_eq!(out.result.backbone_sha256_before, out.result.backbone_sha256_after);
            assert_eq!(out.result.curves.len(), 2);
            // only training images go through the policy
            let expected = if aug == AugmentLevel::None { 0 } else { 2 * 80 };
            assert_eq!(out.policy.invocations(), expected);
        }
        let out = run_downstream(&small_config(Mode::Unfrozen), Some(spec), &data, &DownstreamOptions::default()).unwrap();
        assert_ne!(out.result.backbone_sha256_before, out.result.backbone_sha256_after);
    }

    #[test]
    fn identical_configs_give_identical_results() {
        let data = synthetic_cifar(6, 3, 6);
        let spec: BackboneSpec = "nin-1/w16".parse().unwrap();
        let mut c = small_config(Mode::Unfrozen);
        c.augmentation = AugmentLevel::Weak;
        let strip = |mut r: RunResult| {
            r.curves.iter_mut().for_each(|p| p.seconds = 0.0);
            r
        };
        let a = run_downstream(&c, Some(spec), &data, &DownstreamOptions::default()).unwrap();
        let b = run_downstream(&c, Some(spec), &data, &DownstreamOptions::default()).unwrap();
        assert_eq!(strip(a.result), strip(b.result));
    }

    #[test]
    fn result_files_round_trip() {
        let data = synthetic_cifar(4, 2, 7);
        let spec: BackboneSpec = "vgg16-1/w16".parse().unwrap();
        let out = run_downstream(&small_config(Mode::Frozen), Some(spec), &data, &DownstreamOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.result.write(dir.path()).unwrap();
        let back = RunResult::read(dir.path()).unwrap();
        assert_eq!(back, out.result);
        assert!((0.0..=1.0).contains(&back.final_test_accuracy));
    }

    #[test]
    fn spec_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec: BackboneSpec = "vgg16-1/w16".parse().unwrap();
        let mut m = crate::models::attach_pretext_head(build_backbone::<f32>(spec, 0).unwrap(), 2, 0).unwrap();
        let ck = Checkpoint::from_model(
            &mut m,
            NormStats::identity(),
            Provenance {
                transform_set: SetName::Rot2,
                epochs_completed: 1,
                total_epochs: 1,
                seed: 0,
                config_hash: String::new(),
                producer: String::new(),
            },
        );
        let path = dir.path().join("c.tssl");
        ck.save(&path).unwrap();
        let c = DownstreamConfig::new(path.to_string_lossy(), Mode::Frozen);
        let other: BackboneSpec = "vgg16-2/w16".parse().unwrap();
        let data = synthetic_cifar(1, 1, 1);
        assert!(matches!(
            run_downstream(&c, Some(other), &data, &DownstreamOptions::default()),
            Err(Error::Config(_))
        ));
    }
}
