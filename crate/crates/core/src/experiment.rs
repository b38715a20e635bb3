//! Declarative experiments: one config file describes pretext runs and the
//! downstream evaluations on top of them. List-valued fields expand into a
//! sweep over their cartesian product.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::dataset::{
    build_pretext_random, build_pretext_separate, load_cifar10, BuildMethod, CifarSplits, Grouping, PretextDataset,
};
use crate::downstream::{
    train_downstream, AugmentLevel, BackboneSource, DownstreamConfig, DownstreamOptions, Mode, RunResult, RANDOM_INIT,
    SUMMARY_FILE,
};
use crate::error::{Error, Result};
use crate::geometry::{SetName, TransformSet};
use crate::models::BackboneSpec;
use crate::nn::OptimizerKind;
use crate::pretext::{train_pretext, PretextTrainConfig, TrainOptions, FINAL_CHECKPOINT};
use crate::synthetic::synthetic_cifar;

/// A single value or a list of values to sweep over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sweep<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> Sweep<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            Sweep::One(v) => vec![v.clone()],
            Sweep::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with the CIFAR-10 binary batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cifar_dir: Option<PathBuf>,
    /// Generate the procedural stand-in corpus instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    /// Also use the test split as pretext source images.
    #[serde(default)]
    pub include_test_split: bool,
    /// Cap on pretext source images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretext_sources: Option<usize>,
    /// Test images transformed to measure held-out pretext accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_sources: Option<usize>,
}

fn d_sets() -> Sweep<SetName> {
    Sweep::One(SetName::Rot4)
}
fn d_model() -> Sweep<String> {
    Sweep::One("vgg16-2".into())
}
fn d_seed() -> Sweep<u64> {
    Sweep::One(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextSection {
    #[serde(default = "d_sets")]
    pub transform_set: Sweep<SetName>,
    /// Backbone strings such as `vgg16-2` or `resnet50-3/w4`.
    #[serde(default = "d_model")]
    pub model: Sweep<String>,
    #[serde(default = "d_seed")]
    pub seed: Sweep<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build_method: Option<BuildMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub copies_per_source: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<Grouping>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_drop_epochs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_drop_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl Default for PretextSection {
    fn default() -> Self {
        Self {
            transform_set: d_sets(),
            model: d_model(),
            seed: d_seed(),
            build_method: None,
            copies_per_source: None,
            grouping: None,
            batch_size: None,
            optimizer: None,
            base_lr: None,
            lr_drop_epochs: None,
            lr_drop_factor: None,
            epochs: None,
            weight_decay: None,
            checkpoint_every: None,
        }
    }
}

fn d_modes() -> Sweep<Mode> {
    Sweep::Many(Mode::ALL.to_vec())
}
fn d_aug() -> Sweep<AugmentLevel> {
    Sweep::One(AugmentLevel::None)
}
fn d_opt() -> Sweep<OptimizerKind> {
    Sweep::One(OptimizerKind::Rmsprop)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamSection {
    #[serde(default = "d_modes")]
    pub mode: Sweep<Mode>,
    #[serde(default = "d_aug")]
    pub augmentation: Sweep<AugmentLevel>,
    #[serde(default = "d_opt")]
    pub optimizer: Sweep<OptimizerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_drop_epochs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_drop_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Also evaluate an untrained backbone of each model as a control.
    #[serde(default)]
    pub random_init_baseline: bool,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        Self {
            mode: d_modes(),
            augmentation: d_aug(),
            optimizer: d_opt(),
            epochs: None,
            batch_size: None,
            base_lr: None,
            lr_drop_epochs: None,
            lr_drop_factor: None,
            weight_decay: None,
            train_limit: None,
            random_init_baseline: false,
        }
    }
}

fn d_out() -> PathBuf {
    PathBuf::from("runs")
}
fn d_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "d_out")]
    pub output_dir: PathBuf,
    #[serde(default = "d_workers")]
    pub workers: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretext: PretextSection,
    #[serde(default)]
    pub downstream: DownstreamSection,
}

/// SHA-256 of the canonical JSON form of `value` (object keys sorted, no
/// whitespace), so formatting and key order do not matter.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("config serializes");
    let bytes = serde_json::to_vec(&canonical).expect("JSON value serializes");
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        if self.data.cifar_dir.is_some() == self.data.synthetic.is_some() {
            return Err(Error::config("set exactly one of data.cifar_dir and data.synthetic"));
        }
        self.plan().map(|_| ())
    }

    /// Expands every sweep into concrete runs.
    pub fn plan(&self) -> Result<Vec<PretextPlan>> {
        let p = &self.pretext;
        let d = &self.downstream;
        let mut plans = Vec::new();
        let mut models = Vec::new();
        for model in p.model.values() {
            let spec: BackboneSpec = model.parse()?;
            for set in p.transform_set.values() {
                for seed in p.seed.values() {
                    let mut cfg = PretextTrainConfig::new(set, spec);
                    cfg.seed = seed;
                    if let Some(v) = p.build_method {
                        cfg.build_method = v;
                    }
                    if let Some(v) = p.copies_per_source {
                        cfg.copies_per_source = v;
                    }
                    if let Some(v) = p.grouping {
                        cfg.grouping = v;
                    }
                    if let Some(v) = p.batch_size {
                        cfg.batch_size = v;
                    }
                    if let Some(v) = p.optimizer {
                        cfg.optimizer = v;
                    }
                    if let Some(v) = p.base_lr {
                        cfg.base_lr = v;
                    }
                    if let Some(v) = &p.lr_drop_epochs {
                        cfg.lr_drop_epochs = v.clone();
                    }
                    if let Some(v) = p.lr_drop_factor {
                        cfg.lr_drop_factor = v;
                    }
                    if let Some(v) = p.epochs {
                        cfg.epochs = v;
                    }
                    if let Some(v) = p.weight_decay {
                        cfg.weight_decay = v;
                    }
                    if let Some(v) = p.checkpoint_every {
                        cfg.checkpoint_every = v;
                    }
                    cfg.validate()?;
                    let id = format!("{set}_{spec}_s{seed}").replace('/', "-");
                    let hash = config_hash(&(&self.data, &cfg));
                    plans.push(PretextPlan {
                        id: id.clone(),
                        hash,
                        pretext: Some(cfg),
                        spec,
                        seed,
                        downstream: self.downstream_plans(&id, seed)?,
                    });
                }
                if d.random_init_baseline && !models.contains(&spec) {
                    models.push(spec);
                }
            }
        }
        for spec in models {
            for seed in p.seed.values() {
                let id = format!("{RANDOM_INIT}_{spec}_s{seed}").replace('/', "-");
                plans.push(PretextPlan {
                    id: id.clone(),
                    hash: config_hash(&(&self.data, &spec, seed)),
                    pretext: None,
                    spec,
                    seed,
                    downstream: self.downstream_plans(&id, seed)?,
                });
            }
        }
        Ok(plans)
    }

    fn downstream_plans(&self, pretext_id: &str, seed: u64) -> Result<Vec<DownstreamPlan>> {
        let d = &self.downstream;
        let mut out = Vec::new();
        for mode in d.mode.values() {
            for aug in d.augmentation.values() {
                for opt in d.optimizer.values() {
                    let mut cfg = DownstreamConfig::new(RANDOM_INIT, mode);
                    cfg.augmentation = aug;
                    cfg.optimizer = opt;
                    cfg.seed = seed;
                    if let Some(v) = d.epochs {
                        cfg.epochs = v;
                    }
                    if let Some(v) = d.batch_size {
                        cfg.batch_size = v;
                    }
                    if let Some(v) = d.base_lr {
                        cfg.base_lr = v;
                    }
                    if let Some(v) = &d.lr_drop_epochs {
                        cfg.lr_drop_epochs = v.clone();
                    }
                    if let Some(v) = d.lr_drop_factor {
                        cfg.lr_drop_factor = v;
                    }
                    if let Some(v) = d.weight_decay {
                        cfg.weight_decay = v;
                    }
                    cfg.train_limit = d.train_limit;
                    cfg.validate()?;
                    out.push(DownstreamPlan {
                        id: format!("{}_{}_{}", mode.as_str(), aug.as_str(), opt.as_str()),
                        pretext_id: pretext_id.to_string(),
                        config: cfg,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// One pretext run (or the random-init control) and its evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextPlan {
    pub id: String,
    pub hash: String,
    /// `None` for the random-init control.
    pub pretext: Option<PretextTrainConfig>,
    pub spec: BackboneSpec,
    pub seed: u64,
    pub downstream: Vec<DownstreamPlan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamPlan {
    pub id: String,
    pub pretext_id: String,
    /// Checkpoint is filled in at run time.
    pub config: DownstreamConfig,
}

impl DownstreamPlan {
    pub fn hash(&self, pretext_hash: &str) -> String {
        let mut cfg = self.config.clone();
        cfg.checkpoint = String::new();
        config_hash(&(pretext_hash, &cfg))
    }
}

/// Loads CIFAR-10 or generates the synthetic corpus, per `data`.
pub fn load_data(data: &DataConfig) -> Result<CifarSplits> {
    match (&data.cifar_dir, &data.synthetic) {
        (Some(dir), None) => load_cifar10(dir),
        (None, Some(s)) => Ok(synthetic_cifar(s.train_per_class, s.test_per_class, s.seed)),
        _ => Err(Error::config("set exactly one of data.cifar_dir and data.synthetic")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Trained,
    Resumed,
    Skipped,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentReport {
    /// `(run directory, status)` for every pretext and downstream run.
    pub runs: Vec<(PathBuf, RunStatus)>,
}

impl ExperimentReport {
    pub fn count(&self, status: RunStatus) -> usize {
        self.runs.iter().filter(|(_, s)| *s == status).count()
    }
}

#[derive(Serialize, Deserialize)]
struct RunStamp {
    hash: String,
    config: serde_json::Value,
}

/// Exclusive ownership of a run directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "{} is locked by another run; delete {} if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Records `hash` in `dir/run.json`, or checks it against the one there.
fn stamp_or_check<C: Serialize>(dir: &Path, hash: &str, config: &C) -> Result<bool> {
    let path = dir.join("run.json");
    if path.exists() {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let stamp: RunStamp = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if stamp.hash != hash {
            return Err(Error::config(format!(
                "{} holds a run with configuration hash {}, but this configuration hashes to {hash}; \
                 use a different output directory or remove the old run",
                dir.display(),
                stamp.hash
            )));
        }
        return Ok(true);
    }
    let stamp = RunStamp {
        hash: hash.to_string(),
        config: serde_json::to_value(config).expect("config serializes"),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::dataset::write_atomic(&path, &serde_json::to_vec_pretty(&stamp).expect("stamp serializes"))?;
    Ok(false)
}

pub fn pretext_dir(out: &Path, plan: &PretextPlan) -> PathBuf {
    out.join("pretext").join(&plan.id)
}

pub fn downstream_dir(out: &Path, plan: &DownstreamPlan) -> PathBuf {
    out.join("downstream").join(&plan.pretext_id).join(&plan.id)
}

/// Which part of an experiment to execute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stage {
    /// Pretext training only.
    Pretext,
    /// Downstream evaluations only; pretext checkpoints must already exist.
    Downstream,
    #[default]
    All,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub stage: Stage,
    pub verbose: bool,
}

/// The pretext training set for `pcfg` and, when configured, a held-out
/// pretext set built from test images.
pub fn pretext_datasets(
    data: &DataConfig,
    pcfg: &PretextTrainConfig,
    splits: &CifarSplits,
) -> Result<(PretextDataset, Option<PretextDataset>)> {
    let set = TransformSet::canonical(pcfg.transform_set)?;
    let mut sources = splits.pretext_sources(data.include_test_split);
    if let Some(n) = data.pretext_sources {
        sources.truncate(n);
    }
    let ds = match pcfg.build_method {
        BuildMethod::Separate => build_pretext_separate(sources, &set)?,
        BuildMethod::Random => build_pretext_random(sources, &set, pcfg.copies_per_source, pcfg.seed)?,
    };
    let holdout = match data.holdout_sources {
        Some(n) if n > 0 && !data.include_test_split && !splits.test.is_empty() => {
            let n = n.min(splits.test.len());
            Some(build_pretext_separate(splits.test[..n].to_vec(), &set)?)
        }
        _ => None,
    };
    Ok((ds, holdout))
}

/// Runs every planned pretext and downstream job under
/// `config.output_dir`. Finished runs with a matching configuration hash
/// are skipped; interrupted pretext runs resume from their last checkpoint.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let plans = config.plan()?;
    let mut data: Option<CifarSplits> = None;
    let data_cell = Mutex::new(&mut data);
    let report = Mutex::new(ExperimentReport::default());
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let next = AtomicUsize::new(0);

    let load = || -> Result<CifarSplits> {
        let mut guard = data_cell.lock().unwrap();
        if guard.is_none() {
            **guard = Some(load_data(&config.data)?);
        }
        Ok(guard.as_ref().unwrap().clone())
    };

    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(plans.len()).max(1) {
            scope.spawn(|| loop {
                if first_error.lock().unwrap().is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(plan) = plans.get(i) else { return };
                match run_plan(config, plan, &load, opts) {
                    Ok(runs) => report.lock().unwrap().runs.extend(runs),
                    Err(e) => {
                        first_error.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let mut report = report.into_inner().unwrap();
    report.runs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(report)
}

fn run_plan(
    config: &ExperimentConfig,
    plan: &PretextPlan,
    load: &(dyn Fn() -> Result<CifarSplits> + Sync),
    opts: &RunOptions,
) -> Result<Vec<(PathBuf, RunStatus)>> {
    let out = &config.output_dir;
    let mut runs = Vec::new();
    let mut splits: Option<CifarSplits> = None;
    let get = |splits: &mut Option<CifarSplits>| -> Result<CifarSplits> {
        if splits.is_none() {
            *splits = Some(load()?);
        }
        Ok(splits.clone().unwrap())
    };

    let checkpoint = match &plan.pretext {
        Some(pcfg) => {
            let dir = pretext_dir(out, plan);
            let _lock = RunLock::acquire(&dir)?;
            let existed = stamp_or_check(&dir, &plan.hash, &(&config.data, pcfg))?;
            let final_path = dir.join(FINAL_CHECKPOINT);
            if final_path.exists() {
                runs.push((dir.clone(), RunStatus::Skipped));
            } else if opts.stage == Stage::Downstream {
                return Err(Error::config(format!(
                    "pretext run {} has no final checkpoint yet; train it first",
                    dir.display()
                )));
            } else {
                let data = get(&mut splits)?;
                let (ds, holdout) = pretext_datasets(&config.data, pcfg, &data)?;
                let topts = TrainOptions {
                    out_dir: Some(dir.clone()),
                    resume: true,
                    config_hash: plan.hash.clone(),
                    verbose: opts.verbose,
                };
                let resumed = existed && dir.join("checkpoints").exists();
                let outcome = train_pretext(pcfg, &ds, holdout.as_ref(), &topts)?;
                let summary = serde_json::json!({
                    "config_hash": plan.hash,
                    "holdout_accuracy": outcome.holdout_accuracy,
                    "first_batch_loss": outcome.first_batch_loss,
                    "final": outcome.history.epochs.last(),
                });
                crate::dataset::write_atomic(
                    &dir.join("pretext_summary.json"),
                    &serde_json::to_vec_pretty(&summary).expect("summary serializes"),
                )?;
                runs.push((dir.clone(), if resumed { RunStatus::Resumed } else { RunStatus::Trained }));
            }
            Some((Checkpoint::load(&final_path)?, final_path))
        }
        None => None,
    };

    if opts.stage == Stage::Pretext {
        return Ok(runs);
    }
    for dplan in &plan.downstream {
        let dir = downstream_dir(out, dplan);
        let _lock = RunLock::acquire(&dir)?;
        let hash = dplan.hash(&plan.hash);
        let mut cfg = dplan.config.clone();
        if let Some((_, path)) = &checkpoint {
            cfg.checkpoint = path.to_string_lossy().into_owned();
        }
        stamp_or_check(&dir, &hash, &cfg)?;
        if let Ok(existing) = RunResult::read(&dir) {
            if existing.config_hash == hash {
                runs.push((dir, RunStatus::Skipped));
                continue;
            }
        }
        let data = get(&mut splits)?;
        let source = match &checkpoint {
            Some((ck, path)) => BackboneSource::Pretrained { checkpoint: ck, path },
            None => BackboneSource::RandomInit { spec: plan.spec },
        };
        let dopts = DownstreamOptions {
            config_hash: hash.clone(),
            verbose: opts.verbose,
        };
        let outcome = train_downstream(&cfg, source, &data, &dopts)?;
        outcome.result.write(&dir)?;
        runs.push((dir, RunStatus::Trained));
    }
    Ok(runs)
}

/// Every `summary.json` below `dir`, parsed. Unreadable files are returned
/// as warnings instead of failing the whole scan.
pub fn collect_results(dir: impl AsRef<Path>) -> (Vec<(PathBuf, RunResult)>, Vec<String>) {
    let mut results = Vec::new();
    let mut warnings = Vec::new();
    for entry in walkdir::WalkDir::new(dir.as_ref()).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                warnings.push(format!("cannot scan: {e}"));
                continue;
            }
        };
        if entry.file_name() != SUMMARY_FILE {
            continue;
        }
        let run_dir = entry.path().parent().unwrap_or(Path::new(".")).to_path_buf();
        match RunResult::read(&run_dir) {
            Ok(r) => results.push((run_dir, r)),
            Err(e) => warnings.push(format!("{}: {e}", entry.path().display())),
        }
    }
    (results, warnings)
}

/// The rotation sweep behind the main results table: ten model-block rows, three rotation sets, both modes.
pub fn table1a_sweep() -> ExperimentConfig {
    let models = [
        "resnet50-2",
        "resnet50-3",
        "resnet50-4",
        "resnet50-5",
        "densenet201-2",
        "densenet201-4",
        "vgg16-2",
        "vgg16-5",
        "nin-2",
        "resnet152v2-2",
    ];
    ExperimentConfig {
        name: Some("rotation prediction".into()),
        output_dir: d_out(),
        workers: 1,
        data: DataConfig {
            cifar_dir: Some(PathBuf::from("data/cifar-10-batches-bin")),
            ..DataConfig::default()
        },
        pretext: PretextSection {
            transform_set: Sweep::Many(vec![SetName::Rot2, SetName::Rot4, SetName::Rot8]),
            model: Sweep::Many(models.iter().map(|s| s.to_string()).collect()),
            ..PretextSection::default()
        },
        downstream: DownstreamSection::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1a_expands_to_sixty_results() {
        let cfg = table1a_sweep();
        let plans = cfg.plan().unwrap();
        assert_eq!(plans.len(), 30);
        assert_eq!(plans.iter().map(|p| p.downstream.len()).sum::<usize>(), 60);
        let ids: std::collections::BTreeSet<_> = plans.iter().map(|p| p.id.clone()).collect();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn toml_round_trip_and_stable_hash() {
        let cfg = table1a_sweep();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());

        let a = r#"
            output_dir = "out"
            [data]
            synthetic = { train_per_class = 2, test_per_class = 1 }
            [pretext]
            model = "vgg16-1/w16"
            transform_set = ["rot2", "rot4"]
            epochs = 2
            lr_drop_epochs = [1]
            [downstream]
            epochs = 1
            lr_drop_epochs = []
        "#;
        let b = r#"
            [downstream]
            lr_drop_epochs = [ ]
            epochs = 1
            [pretext]
            lr_drop_epochs = [1]
            epochs   = 2
            transform_set = [ "rot2",   "rot4" ]
            model = "vgg16-1/w16"

            [data]
            synthetic = { test_per_class = 1, train_per_class = 2 }
            output_dir_is_not_here = 0
        "#;
        assert!(ExperimentConfig::from_toml(b).is_err(), "unknown keys are rejected");
        let b = b.replace("output_dir_is_not_here = 0", "").replace("[downstream]", "output_dir = \"out\"\n[downstream]");
        let (a, b) = (ExperimentConfig::from_toml(a).unwrap(), ExperimentConfig::from_toml(&b).unwrap());
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_sweeps_are_config_errors() {
        let mut cfg = table1a_sweep();
        cfg.pretext.model = Sweep::One("vgg16-9".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = table1a_sweep();
        cfg.pretext.transform_set = Sweep::One(SetName::Affine10);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.pretext.batch_size = Some(120);
        cfg.validate().unwrap();
    }
}
