use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::augment::AugmentPolicy;
use crate::hardness::HardnessKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How target predictions are combined for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictionMode {
    Weighted,
    Average,
    Source(usize),
}

impl fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictionMode::Weighted => f.write_str("weighted"),
            PredictionMode::Average => f.write_str("average"),
            PredictionMode::Source(m) => write!(f, "source-{m}"),
        }
    }
}

impl FromStr for PredictionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "average" => Ok(Self::Average),
            _ => s
                .strip_prefix("source-")
                .and_then(|m| m.parse().ok())
                .map(Self::Source)
                .ok_or_else(|| format!("unknown prediction mode {s:?} (weighted|average|source-<m>)")),
        }
    }
}

impl Serialize for PredictionMode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PredictionMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Widths {
    pub hidden: usize,
    pub feat_dim: usize,
    pub adapt_hidden: usize,
    pub aligned_dim: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self {
            hidden: 64,
            feat_dim: 32,
            adapt_hidden: 64,
            aligned_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    /// Smoothing factor of the hardness moving average.
    pub beta: f64,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Fraction of pseudo-labeled target rows kept for the contrastive term.
    pub ratio: f64,
    pub lambda2: f64,
    pub tem: f64,
    /// Steepness of the inter-loss ramp.
    pub theta: f64,
    /// Replaces the ramp with a constant inter-loss weight.
    pub lambda1: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            beta: 0.8,
            tau: 0.6,
            ratio: 0.4,
            lambda2: 0.7,
            tem: 0.15,
            theta: 10.0,
            lambda1: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optim {
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Rate of the ensemble logits.
    pub lr_ensemble: f64,
    pub momentum: f64,
    /// Apply `lr / (1 + 10p)^0.75` annealing.
    pub anneal: bool,
}

impl Default for Optim {
    fn default() -> Self {
        Self {
            lr_backbone: 0.001,
            lr_heads: 0.01,
            lr_ensemble: 0.001,
            momentum: 0.9,
            anneal: true,
        }
    }
}

/// Hardness measure used by each consumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AhmSelection {
    pub augmentation: HardnessKind,
    pub inter: HardnessKind,
    pub intra: HardnessKind,
}

impl Default for AhmSelection {
    fn default() -> Self {
        Self {
            augmentation: HardnessKind::Smooth,
            inter: HardnessKind::ComparativeClustered,
            intra: HardnessKind::Comparative,
        }
    }
}

/// Component switches for ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub mmd: bool,
    pub augmentation: bool,
    /// Hardness-driven augmentation mix; off means strong augmentation only.
    pub adjusting: bool,
    pub wc_mmd: bool,
    /// Hardness weights in the clustered MMD; off means uniform per group.
    pub weighting: bool,
    pub pcm: bool,
    /// Hardness-ranked selection for the contrastive term; off means random.
    pub selecting: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            mmd: true,
            augmentation: true,
            adjusting: true,
            wc_mmd: true,
            weighting: true,
            pcm: true,
            selecting: true,
        }
    }
}

/// Reassigns a fraction of correct target pseudo-labels to a random other
/// class during `[start_epoch, end_epoch)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corruption {
    pub ratio: f64,
    pub start_epoch: usize,
    pub end_epoch: usize,
}

impl Corruption {
    pub fn active(&self, epoch: usize) -> bool {
        self.ratio > 0.0 && epoch >= self.start_epoch && epoch < self.end_epoch
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSections {
    pub source: AugmentPolicy,
    pub target: AugmentPolicy,
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSource {
    /// Task manifest written by `gen`; the built-in default task when absent.
    pub manifest: Option<PathBuf>,
    /// Generator seed of the built-in task.
    pub seed: u64,
}

impl Default for TaskSource {
    fn default() -> Self {
        Self {
            manifest: None,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub prediction_mode: PredictionMode,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub ablation_seeds: Vec<u64>,
    pub model: Widths,
    pub hyper: Hyper,
    pub optim: Optim,
    pub ahm: AhmSelection,
    pub toggles: Toggles,
    pub corruption: Corruption,
    pub augment: AugmentSections,
    pub task: TaskSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 10,
            epochs: 100,
            batch_size: 32,
            prediction_mode: PredictionMode::Weighted,
            checkpoint_every: 0,
            ablation_seeds: vec![10, 11, 12],
            model: Widths::default(),
            hyper: Hyper::default(),
            optim: Optim::default(),
            ahm: AhmSelection::default(),
            toggles: Toggles::default(),
            corruption: Corruption::default(),
            augment: AugmentSections::default(),
            task: TaskSource::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<string>"),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML config. Relative task manifest paths resolve against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let (Some(m), Some(dir)) = (&config.task.manifest, path.parent()) {
            if m.is_relative() {
                config.task.manifest = Some(dir.join(m));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let h = &self.hyper;
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if !(0.0..1.0).contains(&h.beta) {
            return bad("hyper.beta must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&h.tau) {
            return bad("hyper.tau must lie in [0, 1]");
        }
        if !(h.ratio > 0.0 && h.ratio <= 1.0) {
            return bad("hyper.ratio must lie in (0, 1]");
        }
        if h.lambda2 < 0.0 || h.lambda1.is_some_and(|l| l < 0.0) {
            return bad("loss weights must be non-negative");
        }
        if h.tem.is_nan() || h.tem <= 0.0 {
            return bad("hyper.tem must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.corruption.ratio) {
            return bad("corruption.ratio must lie in [0, 1]");
        }
        if [self.optim.lr_backbone, self.optim.lr_heads, self.optim.lr_ensemble].iter().any(|&lr| lr < 0.0) {
            return bad("learning rates must be non-negative");
        }
        for (name, p) in [("source", &self.augment.source), ("target", &self.augment.target)] {
            p.validate()
                .map_err(|e| ConfigError::Invalid(format!("augment.{name}: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let c = ExperimentConfig::default();
        assert_eq!(c.hyper.beta, 0.8);
        assert_eq!(c.hyper.tau, 0.6);
        assert_eq!(c.hyper.ratio, 0.4);
        assert_eq!(c.hyper.lambda2, 0.7);
        assert_eq!(c.hyper.tem, 0.15);
        assert_eq!(c.hyper.theta, 10.0);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.optim.lr_backbone, 0.001);
        assert_eq!(c.optim.lr_heads, 0.01);
        assert_eq!(c.optim.momentum, 0.9);
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_sections() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let partial = ExperimentConfig::from_toml_str(
            "seed = 3\nprediction_mode = \"source-1\"\n[ahm]\nintra = \"Hc\"\n[toggles]\npcm = false\n",
        )
        .unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.prediction_mode, PredictionMode::Source(1));
        assert_eq!(partial.ahm.intra, HardnessKind::ComparativeClustered);
        assert!(!partial.toggles.pcm);
        assert!(partial.toggles.wc_mmd);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = ExperimentConfig::from_toml_str("[hyper]\nbetta = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("betta"), "{err}");
        assert!(ExperimentConfig::from_toml_str("sed = 1\n").is_err());
    }

    #[test]
    fn invariants_enforced() {
        assert!(ExperimentConfig::from_toml_str("[hyper]\nbeta = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[hyper]\nratio = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[hyper]\ntem = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("batch_size = 1\n").is_err());
    }

    #[test]
    fn prediction_mode_parse() {
        for m in [PredictionMode::Weighted, PredictionMode::Average, PredictionMode::Source(2)] {
            assert_eq!(m.to_string().parse::<PredictionMode>().unwrap(), m);
        }
        assert!("best".parse::<PredictionMode>().is_err());
    }
}
