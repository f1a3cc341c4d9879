//! Experiment configuration: one TOML file with an explicit schema version.
//!
//! ```toml
//! schema_version = 1
//!
//! [dataset.synth]
//! task_kind = "classification"
//! n_classes = 2
//! dims_o = [3, 8, 8]
//! dims_p = [1, 8, 8]
//! ordinary_snr = 1.0
//! privileged_snr = 4.0
//! cross_corr = 0.5
//! n_train = 400
//! n_eval = 400
//! seed = 7
//!
//! [variant]
//! variant = "full"
//!
//! [run]
//! epochs = 10
//! ```
//!
//! Unknown keys are rejected. Task-dependent defaults (learning rate, batch size,
//! schedule) are filled in by [`ExperimentConfig::normalized`], and the digest is
//! taken over the normalized form with sorted keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{Variant, VariantSpec};
use crate::data::{DirectoryLayout, SynthTaskSpec, TaskKind};
use crate::error::{Error, Result};
use crate::jdn::{JdnConfig, KernelConfig};
use crate::model::ModelConfig;
use crate::optim::Schedule;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    Synth(SynthTaskSpec),
    Directory(DirectoryDataset),
    /// A file written by `write_archive` with `train` and `eval` splits.
    Archive(ArchiveDataset),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryDataset {
    pub root: PathBuf,
    pub layout: DirectoryLayout,
    /// Trailing share of the (stem-ordered) samples held out for evaluation.
    #[serde(default = "default_fraction")]
    pub eval_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveDataset {
    pub path: PathBuf,
}

fn default_fraction() -> f64 {
    0.2
}

impl DatasetConfig {
    pub fn task_kind(&self) -> Option<TaskKind> {
        match self {
            DatasetConfig::Synth(s) => Some(s.task_kind),
            DatasetConfig::Directory(d) => Some(d.layout.task_kind),
            DatasetConfig::Archive(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossesConfig {
    #[serde(default)]
    pub kernel: KernelConfig,
    /// Softmax temperature of the conditional term.
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    #[serde(default = "default_target_ratio")]
    pub target_ratio: f64,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    /// Smallest allowed mean magnitude of the transformed ordinary features.
    #[serde(default = "default_collapse_floor")]
    pub collapse_floor: f64,
}

fn one() -> f64 {
    1.0
}
fn default_max_positions() -> usize {
    256
}
fn default_target_ratio() -> f64 {
    0.1
}
fn default_ema_decay() -> f64 {
    0.9
}
fn default_collapse_floor() -> f64 {
    1e-3
}

impl Default for LossesConfig {
    fn default() -> Self {
        LossesConfig {
            kernel: KernelConfig::default(),
            temperature: one(),
            max_positions: default_max_positions(),
            target_ratio: default_target_ratio(),
            ema_decay: default_ema_decay(),
            collapse_floor: default_collapse_floor(),
        }
    }
}

impl LossesConfig {
    pub fn jdn(&self) -> JdnConfig {
        JdnConfig {
            kernel: self.kernel,
            temperature: self.temperature,
            max_positions: self.max_positions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Defaults to 0.001 for classification and 0.01 for segmentation.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Defaults to 64 for classification and 8 for segmentation.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Defaults to constant for classification and one-cycle for segmentation.
    #[serde(default)]
    pub schedule: Option<Schedule>,
    /// Learning rate of unimodal pretraining; defaults to `lr`.
    #[serde(default)]
    pub pretrain_lr: Option<f64>,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: None,
            momentum: default_momentum(),
            weight_decay: 0.0,
            batch_size: None,
            schedule: None,
            pretrain_lr: None,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        self.lr.expect("normalized config")
    }

    pub fn pretrain_lr(&self) -> f64 {
        self.pretrain_lr.or(self.lr).expect("normalized config")
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.expect("normalized config")
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule.expect("normalized config")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of initialization, data order and subsampling for a single run.
    #[serde(default)]
    pub seed: u64,
    /// Seeds of an ablation matrix.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_epochs")]
    pub pretrain_epochs: u64,
    /// Evaluate every this many epochs (and always after the last one).
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    /// Trailing share of the training split used as the development split.
    #[serde(default = "default_fraction")]
    pub dev_fraction: f64,
    /// Parallel worker threads for ablation matrices.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_epochs() -> u64 {
    10
}
fn default_eval_every() -> u64 {
    1
}
fn default_output_root() -> PathBuf {
    PathBuf::from("runs")
}
fn default_workers() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: default_seeds(),
            epochs: default_epochs(),
            pretrain_epochs: default_epochs(),
            eval_every: default_eval_every(),
            output_root: default_output_root(),
            dev_fraction: default_fraction(),
            workers: default_workers(),
        }
    }
}

fn default_variant() -> VariantSpec {
    VariantSpec::new(Variant::Full)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub losses: LossesConfig,
    #[serde(default = "default_variant")]
    pub variant: VariantSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Parses and validates, reporting schema violations with their field path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            match inner.span() {
                Some(span) => {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    Error::Config(format!("{} (line {}): {}", path, line, msg))
                }
                None => Error::Config(format!("{}: {}", path, msg)),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn task_kind(&self) -> TaskKind {
        self.dataset.task_kind().unwrap_or(TaskKind::Classification)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version: expected {}, got {}",
                SCHEMA_VERSION, self.schema_version
            ));
        }
        match &self.dataset {
            DatasetConfig::Synth(s) => s.validate()?,
            DatasetConfig::Directory(d) => {
                if !(d.eval_fraction > 0.0 && d.eval_fraction < 1.0) {
                    return bad(format!("dataset.directory.eval_fraction: {} outside (0, 1)", d.eval_fraction));
                }
                if d.layout.n_classes < 2 {
                    return bad("dataset.directory.layout.n_classes: need >= 2".into());
                }
            }
            DatasetConfig::Archive(_) => {}
        }
        self.model.validate()?;
        self.losses.jdn().validate()?;
        crate::balance::LossWeights::new(self.losses.target_ratio, self.losses.ema_decay)?;
        if !(self.losses.collapse_floor >= 0.0) {
            return bad("losses.collapse_floor: must be >= 0".into());
        }
        crate::baselines::build_variant(&self.variant, self.model.fine_tune_ordinary)?;
        let o = &self.optimizer;
        for (name, v) in [("lr", o.lr), ("pretrain_lr", o.pretrain_lr)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("optimizer.{}: must be > 0, got {}", name, v));
                }
            }
        }
        crate::optim::Sgd::new(o.momentum, o.weight_decay)?;
        if o.batch_size == Some(0) {
            return bad("optimizer.batch_size: must be >= 1".into());
        }
        let r = &self.run;
        if r.eval_every == 0 {
            return bad("run.eval_every: must be >= 1".into());
        }
        if !(r.dev_fraction >= 0.0 && r.dev_fraction < 1.0) {
            return bad(format!("run.dev_fraction: {} outside [0, 1)", r.dev_fraction));
        }
        if r.seeds.is_empty() {
            return bad("run.seeds: need at least one seed".into());
        }
        if r.workers == 0 {
            return bad("run.workers: must be >= 1".into());
        }
        Ok(())
    }

    /// The config with task-dependent defaults made explicit.
    pub fn normalized(&self) -> ExperimentConfig {
        let mut c = self.clone();
        let seg = self.task_kind() == TaskKind::Segmentation;
        let o = &mut c.optimizer;
        o.lr.get_or_insert(if seg { 0.01 } else { 0.001 });
        o.batch_size.get_or_insert(if seg { 8 } else { 64 });
        o.schedule.get_or_insert(if seg { Schedule::OneCycle } else { Schedule::Constant });
        o.pretrain_lr = Some(o.pretrain_lr.or(o.lr).expect("set above"));
        c
    }

    /// SHA-256 of the normalized config as JSON with sorted keys.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self.normalized()).expect("config serializes");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
