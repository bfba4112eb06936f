//! Flat key-value experiment configuration.
//!
//! ```text
//! # comment
//! k = 4
//! theta = 0.7
//! scales = 1.0, 0.7071067811865476, 0.5
//! ```
//!
//! Unknown keys are errors. Serialization writes every key in a fixed order
//! with round-trip float formatting, so `parse(to_text(c)) == c`.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::aggregation::{AggregationSettings, Pooling, ProposalMode};
use crate::backbone::BackboneConfig;
use crate::detector::validate_theta;
use crate::error::{AsdaError, Result};
use crate::model::ModelConfig;
use crate::postprocess::default_scales;
use crate::region::MAX_SCALES;
use crate::training::OptimizerConfig;

/// Which aggregation scheme the model implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Soft proposals from the full adversarial stack.
    Asda,
    /// Soft proposals from a single detector (no erasing).
    Sda,
    /// All-ones rectangular proposals.
    Hda,
}

impl FromStr for Variant {
    type Err = AsdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ASDA" => Ok(Variant::Asda),
            "SDA" => Ok(Variant::Sda),
            "HDA" => Ok(Variant::Hda),
            _ => Err(AsdaError::Invalid(format!("unknown proposal variant `{s}` (expected HDA, SDA or ASDA)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Asda => "ASDA",
            Variant::Sda => "SDA",
            Variant::Hda => "HDA",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Number of semantic maps K.
    pub k: usize,
    pub theta: f64,
    /// Number of sliding-window scales L.
    pub levels: usize,
    pub pooling: Pooling,
    pub proposal: Variant,
    /// Requested descriptor dimension, capped by [`ExperimentConfig::effective_dim`].
    pub dim: usize,
    pub margin: f64,
    /// Image scales for multi-scale description.
    pub scales: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub train_backbone: bool,
    pub backbone_channels: Vec<usize>,
    pub backbone_stride: usize,
    pub instances: usize,
    pub views: usize,
    pub image_size: usize,
    /// Fraction of instances held out for evaluation (and again for validation).
    pub holdout: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        ExperimentConfig {
            seed: 0,
            k: 4,
            theta: 0.7,
            levels: 4,
            pooling: Pooling::Mac,
            proposal: Variant::Asda,
            dim: 512,
            margin: opt.margin,
            scales: default_scales(),
            epochs: 30,
            lr: opt.learning_rate,
            lr_decay: opt.lr_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            weight_decay: opt.weight_decay,
            batch_size: opt.batch_size,
            negatives: opt.negatives,
            train_backbone: true,
            backbone_channels: vec![16, 32, 32],
            backbone_stride: 2,
            instances: 20,
            views: 10,
            image_size: 64,
            holdout: 0.2,
        }
    }
}

/// Keys in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "k",
    "theta",
    "levels",
    "pooling",
    "proposal",
    "dim",
    "margin",
    "scales",
    "epochs",
    "lr",
    "lr_decay",
    "beta1",
    "beta2",
    "weight_decay",
    "batch_size",
    "negatives",
    "train_backbone",
    "backbone_channels",
    "backbone_stride",
    "instances",
    "views",
    "image_size",
    "holdout",
];

/// Keys that do not change the parameter shapes or the data a checkpoint was
/// trained on, and so are left out of the config hash.
const UNHASHED: &[&str] = &["epochs", "lr", "lr_decay", "beta1", "beta2", "weight_decay", "batch_size", "negatives", "scales"];

fn key_err(key: &str, message: impl fmt::Display) -> AsdaError {
    AsdaError::ConfigKey {
        key: key.to_string(),
        message: message.to_string(),
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e| key_err(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value.split(',').map(|v| parse_num(key, v)).collect()
}

fn join<T: fmt::Debug>(values: &[T]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    /// Named starting points. `paper` keeps the published hyperparameters,
    /// `desk` raises the learning rate so a laptop run learns within 30
    /// epochs, `tiny` is a seconds-long smoke configuration.
    pub fn preset(name: &str) -> Result<Self> {
        let base = ExperimentConfig::default();
        match name {
            "paper" => Ok(base),
            "desk" => Ok(ExperimentConfig {
                lr: 1e-3,
                ..base
            }),
            "tiny" => Ok(ExperimentConfig {
                dim: 16,
                levels: 2,
                epochs: 2,
                lr: 1e-3,
                negatives: 2,
                backbone_channels: vec![8, 8],
                instances: 10,
                views: 3,
                image_size: 32,
                ..base
            }),
            _ => Err(AsdaError::InvalidConfig(format!(
                "unknown preset `{name}` (expected paper, desk or tiny)"
            ))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "theta" => self.theta = parse_num(key, v)?,
            "levels" => self.levels = parse_num(key, v)?,
            "pooling" => self.pooling = v.parse().map_err(|e: AsdaError| key_err(key, e))?,
            "proposal" => self.proposal = v.parse().map_err(|e: AsdaError| key_err(key, e))?,
            "dim" => self.dim = parse_num(key, v)?,
            "margin" => self.margin = parse_num(key, v)?,
            "scales" => self.scales = parse_list(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_decay" => self.lr_decay = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "negatives" => self.negatives = parse_num(key, v)?,
            "train_backbone" => self.train_backbone = parse_num(key, v)?,
            "backbone_channels" => self.backbone_channels = parse_list(key, v)?,
            "backbone_stride" => self.backbone_stride = parse_num(key, v)?,
            "instances" => self.instances = parse_num(key, v)?,
            "views" => self.views = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "holdout" => self.holdout = parse_num(key, v)?,
            _ => return Err(key_err(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "k" => self.k.to_string(),
            "theta" => format!("{:?}", self.theta),
            "levels" => self.levels.to_string(),
            "pooling" => self.pooling.to_string(),
            "proposal" => self.proposal.to_string(),
            "dim" => self.dim.to_string(),
            "margin" => format!("{:?}", self.margin),
            "scales" => join(&self.scales),
            "epochs" => self.epochs.to_string(),
            "lr" => format!("{:?}", self.lr),
            "lr_decay" => format!("{:?}", self.lr_decay),
            "beta1" => format!("{:?}", self.beta1),
            "beta2" => format!("{:?}", self.beta2),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "batch_size" => self.batch_size.to_string(),
            "negatives" => self.negatives.to_string(),
            "train_backbone" => self.train_backbone.to_string(),
            "backbone_channels" => join(&self.backbone_channels),
            "backbone_stride" => self.backbone_stride.to_string(),
            "instances" => self.instances.to_string(),
            "views" => self.views.to_string(),
            "image_size" => self.image_size.to_string(),
            "holdout" => format!("{:?}", self.holdout),
            _ => return Err(key_err(key, "unknown configuration key")),
        })
    }

    /// Parses `key = value` lines on top of the defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| AsdaError::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(AsdaError::Parse {
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, value).map_err(|e| AsdaError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key is readable")))
            .collect()
    }

    /// Checks every module precondition, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(key_err("k", "need at least one semantic map"));
        }
        validate_theta(self.theta).map_err(|e| key_err("theta", e))?;
        if self.levels > MAX_SCALES {
            return Err(key_err("levels", format!("at most {MAX_SCALES} scales are supported")));
        }
        self.pooling.validate().map_err(|e| key_err("pooling", e))?;
        if self.dim < 1 {
            return Err(key_err("dim", "descriptor dimension must be positive"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(key_err("scales", format!("{:?}: need one or more scales in (0, 1]", self.scales)));
        }
        if !(self.lr > 0.0) {
            return Err(key_err("lr", "learning rate must be > 0"));
        }
        if !(self.margin > 0.0) {
            return Err(key_err("margin", "margin must be > 0"));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(key_err(key, format!("{v} outside [0, 1)")));
            }
        }
        for (key, v) in [("lr_decay", self.lr_decay), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) {
                return Err(key_err(key, format!("{v} must be >= 0")));
            }
        }
        if self.batch_size < 1 {
            return Err(key_err("batch_size", "need at least one tuple per batch"));
        }
        if self.negatives < 1 {
            return Err(key_err("negatives", "need at least one negative per tuple"));
        }
        if self.backbone_stride < 1 {
            return Err(key_err("backbone_stride", "stride must be >= 1"));
        }
        let backbone = self.backbone_config();
        backbone.validate().map_err(|e| key_err("backbone_channels", e))?;
        let min_side = backbone.total_stride().max(crate::feature::MIN_IMAGE_SIDE);
        if self.image_size < min_side {
            return Err(key_err("image_size", format!("{} is below the backbone minimum {min_side}", self.image_size)));
        }
        if self.instances < 2 {
            return Err(key_err("instances", "need at least 2 instances"));
        }
        if self.views < 2 {
            return Err(key_err("views", "need at least 2 views per instance"));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(key_err("holdout", format!("{} outside (0, 1)", self.holdout)));
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig::uniform(&self.backbone_channels, self.backbone_stride)
    }

    /// Semantic maps actually used: SDA runs a single detector.
    pub fn effective_k(&self) -> usize {
        match self.proposal {
            Variant::Sda => 1,
            _ => self.k,
        }
    }

    /// `dim` capped at K·C, and additionally at C for the single-map SDA.
    pub fn effective_dim(&self) -> usize {
        let c = self.backbone_channels.last().copied().unwrap_or(0);
        self.dim.min(self.k * c).min(self.effective_k() * c)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone_config(),
            train_backbone: self.train_backbone,
            steps: self.effective_k(),
            theta: self.theta,
            scales: self.levels,
            settings: AggregationSettings {
                pooling: self.pooling,
                proposal: match self.proposal {
                    Variant::Hda => ProposalMode::Hard,
                    _ => ProposalMode::Soft,
                },
            },
            dim: self.effective_dim(),
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.lr,
            lr_decay: self.lr_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            margin: self.margin,
            batch_size: self.batch_size,
            negatives: self.negatives,
            ..OptimizerConfig::default()
        }
    }

    /// SHA-256 over the keys that determine model shapes and training data.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| !UNHASHED.contains(k)) {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(self.get(k).expect("every listed key is readable").as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
