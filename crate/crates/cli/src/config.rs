//! Declarative experiment configuration.
//!
//! One TOML file describes the dataset, the model, the optimizer, the
//! loss, and the evaluation grouping. The parsed form canonicalizes away
//! formatting, so the sha-256 digest of its serialization identifies the
//! experiment: two files hash alike exactly when they mean the same thing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dbm_core::analysis::GroupThresholds;
use dbm_core::data::GenConfig;
use dbm_core::losses::{
    BaseLoss, BaselineMargin, GradientMode, LossSpec, MarginConfig, MarginMode, DEFAULT_CB_BETA,
};
use dbm_core::model::{HeadKind, ModelSpec};
use dbm_core::train::TrainConfig;
use dbm_core::{Error, Result};

fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_feature() -> usize {
    16
}
fn default_head() -> HeadKind {
    HeadKind::Cosine
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    64
}
fn default_lr0() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    2e-4
}
fn default_warmup() -> usize {
    5
}
fn default_beta() -> f64 {
    DEFAULT_CB_BETA
}
fn default_scale() -> f64 {
    MarginConfig::DEFAULT_SCALE
}
fn default_k() -> f64 {
    0.1
}
fn default_tau() -> f64 {
    1.0
}
fn default_margin_mode() -> MarginMode {
    MarginMode::HardPositives
}
fn default_thresholds() -> GroupThresholds {
    GroupThresholds::default()
}

/// The trunk and head; input width and class count come from `[data]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_feature")]
    pub feature: usize,
    #[serde(default = "default_head")]
    pub head: HeadKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: default_hidden(),
            feature: default_feature(),
            head: default_head(),
        }
    }
}

/// Optimization switches; `seed` drives init and shuffling, not the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    /// First epoch of deferred re-weighting; absent disables it.
    #[serde(default)]
    pub drw_epoch: Option<usize>,
    #[serde(default = "default_beta")]
    pub drw_beta: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr0: default_lr0(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            warmup_epochs: default_warmup(),
            drw_epoch: None,
            drw_beta: default_beta(),
            seed: 0,
        }
    }
}

/// Margin knobs; present at all only when a margin is wanted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginSection {
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_margin_mode")]
    pub mode: MarginMode,
    #[serde(default)]
    pub gradient: GradientMode,
}

impl Default for MarginSection {
    fn default() -> Self {
        MarginSection {
            k: default_k(),
            tau: default_tau(),
            mode: default_margin_mode(),
            gradient: GradientMode::default(),
        }
    }
}

/// Loss selection: a base, an optional difficulty-aware margin, or an
/// optional classic margin baseline (the two margins are exclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub base: BaseLoss,
    #[serde(default = "default_beta")]
    pub cb_beta: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub margin: Option<MarginSection>,
    #[serde(default)]
    pub baseline: Option<BaselineMargin>,
}

impl LossSection {
    pub fn to_spec(&self) -> LossSpec {
        let margin = match self.margin {
            Some(m) => MarginConfig {
                k: m.k,
                tau: m.tau,
                scale: self.scale,
                mode: m.mode,
                gradient: m.gradient,
            },
            None => MarginConfig {
                scale: self.scale,
                ..MarginConfig::disabled()
            },
        };
        LossSpec {
            base: self.base,
            cb_beta: self.cb_beta,
            margin,
            baseline: self.baseline,
        }
    }
}

/// A whole experiment in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Names the output subdirectory.
    pub label: String,
    /// Overrides the output root (`--out` and `DBM_OUT_ROOT` also apply).
    #[serde(default)]
    pub out_root: Option<PathBuf>,
    pub data: GenConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub loss: LossSection,
    #[serde(default = "default_thresholds")]
    pub groups: GroupThresholds,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::parse(0, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.is_empty() || self.label.contains(std::path::is_separator) {
            return Err(Error::invalid(
                "label must be a non-empty name without path separators",
            ));
        }
        self.data.validate()?;
        self.model_spec().validate()?;
        self.groups.validate()?;
        self.train_config(None).validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input: self.data.dim,
            hidden: self.model.hidden.clone(),
            feature: self.model.feature,
            classes: self.data.classes,
            head: self.model.head,
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        self.loss.to_spec()
    }

    /// The trainer configuration, optionally with the seed overridden
    /// from the command line.
    pub fn train_config(&self, seed_override: Option<u64>) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr0: self.train.lr0,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            warmup_epochs: self.train.warmup_epochs,
            drw_epoch: self.train.drw_epoch,
            drw_beta: self.train.drw_beta,
            loss: self.loss_spec(),
            seed: seed_override.unwrap_or(self.train.seed),
        }
    }

    /// Hex sha-256 of the canonical (parsed, re-serialized) config.
    /// Formatting, comments, and key order never reach the hash.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Output root precedence: `--out` flag, then the config's `out_root`,
/// then `DBM_OUT_ROOT`, then `./runs`.
pub fn resolve_out_root(flag: Option<&Path>, cfg_root: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = cfg_root {
        return p.to_path_buf();
    }
    if let Ok(env_root) = std::env::var("DBM_OUT_ROOT") {
        if !env_root.is_empty() {
            return PathBuf::from(env_root);
        }
    }
    PathBuf::from("runs")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
label = "unit"

[data]
classes = 4
dim = 8
imbalance = 10.0
max_count = 40
test_per_class = 5
intra_std = 0.3
center_norm = 1.0
seed = 7

[loss]
base = "bs"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.hidden, vec![64]);
        assert_eq!(cfg.train.epochs, 30);
        assert!(!cfg.loss_spec().has_margin());
        assert_eq!(cfg.train_config(Some(9)).seed, 9);
    }

    #[test]
    fn margin_section_becomes_a_margin_spec() {
        let with_margin = format!("{MINIMAL}\n[loss.margin]\nk = 0.2\n");
        let cfg: ExperimentConfig = toml::from_str(&with_margin).unwrap();
        let spec = cfg.loss_spec();
        assert!(spec.has_margin());
        assert_eq!(spec.margin.k, 0.2);
        assert_eq!(spec.margin.tau, 1.0);
        assert_eq!(spec.margin.mode, MarginMode::HardPositives);
    }

    #[test]
    fn hash_ignores_formatting_but_not_meaning() {
        let a: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let reordered = MINIMAL.replace("classes = 4\ndim = 8", "dim = 8\nclasses = 4");
        assert_ne!(MINIMAL, reordered);
        let b: ExperimentConfig = toml::from_str(&reordered).unwrap();
        assert_eq!(a.hash(), b.hash());

        let mut c: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        c.train.lr0 *= 2.0;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\ntypo_key = 1\n");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
    }

    #[test]
    fn bad_label_is_rejected() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.label = "a/b".into();
        assert!(cfg.validate().is_err());
    }
}
