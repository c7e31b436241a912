//! Declarative run configuration.
//!
//! Configs are TOML. Unknown keys are rejected, omitted keys take the
//! documented defaults, and the provenance hash is computed over the
//! defaults-filled form so formatting and key order do not matter.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::AugmentPolicy;
use crate::networks::{ArchitectureSpec, EncoderKind};
use crate::updates::{EmaSchedule, OptimizerHyper};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("config key `{key}`: {message}")]
    Parse { key: String, message: String },
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

/// Pretraining variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Online branch against two alternately updated EMA targets.
    #[default]
    Tribyol,
    /// One EMA target updated every iteration.
    Byol2view,
    /// No momentum copy; the online branch is its own stop-gradient target.
    Simsiam2view,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Tribyol => "tribyol",
            Mode::Byol2view => "byol2view",
            Mode::Simsiam2view => "simsiam2view",
        }
    }

    pub fn num_views(self) -> usize {
        match self {
            Mode::Tribyol => 3,
            _ => 2,
        }
    }

    pub fn num_targets(self) -> u8 {
        match self {
            Mode::Tribyol => 2,
            Mode::Byol2view => 1,
            Mode::Simsiam2view => 0,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tribyol" => Ok(Mode::Tribyol),
            "byol2view" => Ok(Mode::Byol2view),
            "simsiam2view" => Ok(Mode::Simsiam2view),
            other => Err(format!("unknown mode `{other}`; expected tribyol, byol2view or simsiam2view")),
        }
    }
}

/// Downstream evaluation protocol.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Linear,
    Finetune,
    Transfer,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Linear => "linear",
            Protocol::Finetune => "finetune",
            Protocol::Transfer => "transfer",
        }
    }

    /// `(epochs, evaluate every)` when the config leaves them out.
    pub fn default_cadence(self) -> (usize, usize) {
        match self {
            Protocol::Linear | Protocol::Transfer => (200, 10),
            Protocol::Finetune => (10, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderKind,
    pub input_resolution: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    /// Channel widths of the toy encoder's four blocks.
    pub toy_widths: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = ArchitectureSpec::resnet50();
        let t = ArchitectureSpec::toy();
        Self {
            encoder: a.encoder,
            input_resolution: a.input_resolution,
            hidden_dim: a.hidden_dim,
            embedding_dim: a.embedding_dim,
            toy_widths: t.toy_widths,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self) -> ArchitectureSpec {
        let base = match self.encoder {
            EncoderKind::Toy => ArchitectureSpec::toy(),
            EncoderKind::Resnet50 => ArchitectureSpec::resnet50(),
        };
        let toy_widths = self.toy_widths.clone();
        let feature_dim = match self.encoder {
            EncoderKind::Toy => *toy_widths.last().unwrap_or(&0),
            EncoderKind::Resnet50 => base.feature_dim,
        };
        ArchitectureSpec {
            feature_dim,
            toy_widths,
            hidden_dim: self.hidden_dim,
            embedding_dim: self.embedding_dim,
            input_resolution: self.input_resolution,
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Adds the exchanged-view terms to the loss.
    pub loss_symmetrize: bool,
    /// Coefficient of the third-view term; 1 is the plain sum.
    pub target3_weight: f64,
    /// Epochs between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Mean per-dimension std below which embeddings count as collapsed.
    /// Filled with `0.01 / sqrt(embedding_dim)` when omitted.
    pub collapse_threshold: Option<f64>,
    /// Depth of the view-batch queue between the loader thread and the step.
    pub prefetch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: Mode::Tribyol,
            batch_size: 32,
            epochs: 80,
            seed: 0,
            loss_symmetrize: false,
            target3_weight: 1.0,
            checkpoint_every: 1,
            collapse_threshold: None,
            prefetch: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub protocol: Protocol,
    pub epochs: Option<usize>,
    pub eval_every: Option<usize>,
    pub label_fraction: f64,
    pub batch_size: usize,
    /// Fine-tuning only: keep the encoder fixed and train the head alone.
    pub frozen_backbone: bool,
    /// Fine-tuning only: start from a random encoder instead of the checkpoint.
    pub from_scratch: bool,
    /// Transfer target; the pretraining dataset when omitted.
    pub eval_dataset: Option<String>,
    /// Defaults to the training seed.
    pub seed: Option<u64>,
    pub optimizer: OptimizerHyper,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Linear,
            epochs: None,
            eval_every: None,
            label_fraction: 1.0,
            batch_size: 256,
            frozen_backbone: false,
            from_scratch: false,
            eval_dataset: None,
            seed: None,
            optimizer: OptimizerHyper::default(),
        }
    }
}

/// Everything that determines one run, given the ingested datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub optimizer: OptimizerHyper,
    #[serde(default)]
    pub ema: EmaSchedule,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub probe: ProbeSection,
}

/// The sections that shape pretraining, hashed on their own so that probe
/// settings do not alter a checkpoint's provenance.
#[derive(Serialize)]
struct PretrainPart<'a> {
    format_version: u32,
    dataset: &'a DatasetSection,
    model: &'a ModelSection,
    train: &'a TrainSection,
    optimizer: &'a OptimizerHyper,
    ema: &'a EmaSchedule,
    augment: &'a AugmentPolicy,
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl RunConfig {
    /// Parses TOML, applies `adjust` to the raw values, then fills defaults
    /// and validates.
    pub fn parse_with(text: &str, adjust: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, ConfigError> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            key: String::new(),
            message: e.to_string(),
        })?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            key: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        adjust(&mut cfg);
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        Self::parse_with(text, |_| {})
    }

    pub fn minimal(dataset: &str) -> RunConfig {
        Self::parse(&format!("format_version = {CONFIG_FORMAT_VERSION}\n[dataset]\nid = \"{dataset}\"\n"))
            .expect("minimal config is valid")
    }

    fn fill_defaults(&mut self) {
        self.augment.resolution = self.model.input_resolution;
        if self.train.collapse_threshold.is_none() {
            self.train.collapse_threshold = Some(0.01 / (self.model.embedding_dim.max(1) as f64).sqrt());
        }
        let (epochs, every) = self.probe.protocol.default_cadence();
        self.probe.epochs.get_or_insert(epochs);
        self.probe.eval_every.get_or_insert(every);
        self.probe.seed.get_or_insert(self.train.seed);
        if self.probe.eval_dataset.is_none() {
            self.probe.eval_dataset = Some(self.dataset.id.clone());
        }
    }

    /// Re-applies defaults that depend on other keys after programmatic edits.
    pub fn refresh(&mut self) -> Result<(), ConfigError> {
        self.augment.resolution = self.model.input_resolution;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(invalid(
                "format_version",
                format!("unsupported version {}, expected {CONFIG_FORMAT_VERSION}", self.format_version),
            ));
        }
        if self.dataset.id.is_empty() {
            return Err(invalid("dataset.id", "must not be empty"));
        }
        crate::data::lookup(&self.dataset.id).map_err(|e| invalid("dataset.id", e.to_string()))?;
        if let Some(eval) = &self.probe.eval_dataset {
            crate::data::lookup(eval).map_err(|e| invalid("probe.eval_dataset", e.to_string()))?;
        }
        self.model.architecture().validate().map_err(|e| invalid("model", e.to_string()))?;
        if self.train.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be >= 1"));
        }
        if self.train.epochs == 0 {
            return Err(invalid("train.epochs", "must be >= 1"));
        }
        if !(self.train.target3_weight.is_finite() && self.train.target3_weight >= 0.0) {
            return Err(invalid("train.target3_weight", "must be a finite value >= 0"));
        }
        if let Some(t) = self.train.collapse_threshold {
            if !(t.is_finite() && t >= 0.0) {
                return Err(invalid("train.collapse_threshold", "must be a finite value >= 0"));
            }
        }
        self.optimizer.validate().map_err(|e| invalid("optimizer", e.to_string()))?;
        self.probe.optimizer.validate().map_err(|e| invalid("probe.optimizer", e.to_string()))?;
        self.ema.validate().map_err(|e| invalid("ema", e.to_string()))?;
        self.augment.validate().map_err(|e| invalid("augment", e.to_string()))?;
        let f = self.probe.label_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(invalid("probe.label_fraction", format!("must be in (0, 1], got {f}")));
        }
        if self.probe.batch_size == 0 {
            return Err(invalid("probe.batch_size", "must be >= 1"));
        }
        if self.probe.eval_every == Some(0) {
            return Err(invalid("probe.eval_every", "must be >= 1"));
        }
        Ok(())
    }

    /// Provenance hash of the whole run.
    pub fn hash(&self) -> String {
        sha256_json(self)
    }

    /// Provenance hash of the pretraining-relevant sections.
    pub fn pretrain_hash(&self) -> String {
        sha256_json(&PretrainPart {
            format_version: self.format_version,
            dataset: &self.dataset,
            model: &self.model,
            train: &self.train,
            optimizer: &self.optimizer,
            ema: &self.ema,
            augment: &self.augment,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    parse_config_with(path, |_| {})
}

/// Like [`parse_config`], with `adjust` applied before defaults are filled.
pub fn parse_config_with(path: &Path, adjust: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    RunConfig::parse_with(&text, adjust)
}
