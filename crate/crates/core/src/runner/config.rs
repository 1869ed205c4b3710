//! Experiment configuration: a flat TOML file with one section per
//! subsystem. Every field has a documented default, so a config file only
//! needs to override what it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::GenConfig;
use crate::objectives::{LossWeights, MarginPair};
use crate::{Error, Result};

/// The seven experiment arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Softmax baseline scored by negative max softmax probability.
    E1,
    /// Independent sigmoid heads scored by 1 - max sigmoid.
    E2,
    /// Explicit OOD class trained on auxiliary OOD data.
    E3,
    /// Outlier exposure fine-tuning from the e1 checkpoint.
    E4,
    /// Post-hoc energy rescoring of the e1 checkpoint; trains nothing.
    E5a,
    /// Energy fine-tuning with empirically derived margins.
    E5b,
    /// Wild-data constrained training via the augmented Lagrangian.
    E6,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::E1,
        Method::E2,
        Method::E3,
        Method::E4,
        Method::E5a,
        Method::E5b,
        Method::E6,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::E1 => "e1",
            Method::E2 => "e2",
            Method::E3 => "e3",
            Method::E4 => "e4",
            Method::E5a => "e5a",
            Method::E5b => "e5b",
            Method::E6 => "e6",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}` (expected one of e1, e2, e3, e4, e5a, e5b, e6)"
                ))
            })
    }

    /// Fine-tuning methods start from the e1 checkpoint; e5a rescoring
    /// requires it too.
    pub fn needs_e1_checkpoint(&self) -> bool {
        matches!(self, Method::E4 | Method::E5a | Method::E5b | Method::E6)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimizer and schedule settings shared by every training arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the warmup/inverse-root schedule.
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Warmup steps at the reference dataset size; scaled proportionally to
    /// the actual training split so the warmup fraction is preserved.
    pub warmup_ref_steps: f64,
    pub warmup_ref_samples: f64,
    /// Learning-rate reduction applied when fine-tuning from a checkpoint.
    pub fine_tune_lr_factor: f64,
    /// Fine-tuning epochs that train the classification loss only, before
    /// the OOD objective joins.
    pub warmup_cls_epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 25,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup_ref_steps: 4000.0,
            warmup_ref_samples: 8527.0,
            fine_tune_lr_factor: 0.1,
            warmup_cls_epochs: 2,
        }
    }
}

/// Feature-extractor dimensions; input width comes from the data config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            embedding: 16,
        }
    }
}

/// Augmented Lagrangian settings. `tau` is resolved at run time: either the
/// explicit override or `tau_factor` times the e1 checkpoint's validation
/// classification loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlmSettings {
    pub alpha: f64,
    pub eta_lambda: f64,
    /// May be set to `inf` in the config file to remove the cap.
    pub beta_max: f64,
    pub beta_growth: f64,
    pub beta_init: f64,
    pub tau_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_override: Option<f64>,
}

impl Default for AlmSettings {
    fn default() -> Self {
        AlmSettings {
            alpha: 0.1,
            eta_lambda: 0.001,
            beta_max: 5.0,
            beta_growth: 2.0,
            beta_init: 0.5,
            tau_factor: 1.1,
            tau_override: None,
        }
    }
}

/// Everything a run needs. Seeds are only ever read from here, never from
/// the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    /// Checkpoint the fine-tuning methods start from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e1_checkpoint: Option<PathBuf>,
    /// Override for the energy margins; derived from the e1 checkpoint's
    /// validation energies when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margins: Option<MarginPair>,
    /// Neighbor count for the embedding-space analysis.
    pub knn_k: usize,
    pub training: TrainingConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub alm: AlmSettings,
    pub data: GenConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::E1,
            seed: 1,
            e1_checkpoint: None,
            margins: None,
            knn_k: 5,
            training: TrainingConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            alm: AlmSettings::default(),
            data: GenConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.training.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be positive".into()));
        }
        if self.loss.lambda_oe < 0.0 || self.loss.lambda_energy < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.loss.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        self.data.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML form; identifies a run up to seeds and
    /// method, which are part of the config.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml_string().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Warmup steps scaled from the reference dataset to `n_train` samples.
    pub fn scaled_warmup_steps(&self, n_train: usize) -> f64 {
        let t = &self.training;
        (t.warmup_ref_steps * n_train as f64 / t.warmup_ref_samples).max(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = ExperimentConfig::default();
        let text = config.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(config, back);
        assert_eq!(config.hash(), back.hash());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let config = ExperimentConfig::from_toml_str(
            "method = \"e5b\"\nseed = 3\n[training]\nepochs = 7\n[data]\ntotal_id = 500\n",
        )
        .unwrap();
        assert_eq!(config.method, Method::E5b);
        assert_eq!(config.seed, 3);
        assert_eq!(config.training.epochs, 7);
        assert_eq!(config.training.batch_size, 32);
        assert_eq!(config.data.total_id, 500);
        assert_eq!(config.data.classes, 5);
    }

    #[test]
    fn method_parsing() {
        assert_eq!(Method::parse("e5a").unwrap(), Method::E5a);
        assert!(Method::parse("e9").is_err());
        assert!(Method::E6.needs_e1_checkpoint());
        assert!(!Method::E3.needs_e1_checkpoint());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("[training]\nlr = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("method = \"bogus\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[loss]\nlambda_oe = -1.0\n").is_err());
    }

    #[test]
    fn beta_max_accepts_inf() {
        let config = ExperimentConfig::from_toml_str("[alm]\nbeta_max = inf\n").unwrap();
        assert!(config.alm.beta_max.is_infinite());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn warmup_scaling_preserves_fraction() {
        let config = ExperimentConfig::default();
        let w = config.scaled_warmup_steps(1088);
        assert!((w - 4000.0 * 1088.0 / 8527.0).abs() < 1e-9);
    }
}
