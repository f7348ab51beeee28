//! Experiment configuration: strict-parsing JSON schema plus the
//! documented defaults emitted by `default-config`.

use crate::error::{Error, Result};
use crate::multitask::{MaskMode, TaskKind, TaskSpec};
use crate::nn::EncoderConfig;
use crate::pruning::{PruneConfig, Scope, Selector, Structure};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_weights")]
    pub lr_weights: f64,
    #[serde(default = "default_lr_scores")]
    pub lr_scores: f64,
    #[serde(default = "default_lr_weights")]
    pub lr_heads: f64,
    #[serde(default)]
    pub seed: u64,
    /// Overrides prune.epochs when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default = "default_teacher_seed")]
    pub teacher_seed: u64,
    #[serde(default = "default_noise")]
    pub noise_level: f64,
}

fn default_batch() -> usize {
    32
}

fn default_lr_weights() -> f64 {
    1e-3
}

fn default_lr_scores() -> f64 {
    1e-2
}

fn default_teacher_seed() -> u64 {
    1000
}

fn default_noise() -> f64 {
    0.5
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: default_batch(),
            lr_weights: default_lr_weights(),
            lr_scores: default_lr_scores(),
            lr_heads: default_lr_weights(),
            seed: 0,
            epochs: None,
            teacher_seed: default_teacher_seed(),
            noise_level: default_noise(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: EncoderConfig,
    pub prune: PruneConfig,
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "default_mask_mode")]
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_mask_mode() -> MaskMode {
    MaskMode::Shared
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prune.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task required".into()));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        if self.mask_mode != MaskMode::Shared && self.prune.selector == Selector::Magnitude {
            return Err(Error::Config(
                "separate/hybrid masks need movement scores; magnitude has none".into(),
            ));
        }
        if self.mask_mode != MaskMode::Shared && self.prune.structure == Structure::Rank {
            return Err(Error::Config(
                "per-task rank masks cannot be compacted consistently; use shared".into(),
            ));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(e) = self.training.epochs {
            let mut p = self.prune.clone();
            p.total_epochs = e;
            p.validate()?;
        }
        Ok(())
    }

    /// Total epochs after the training-section override.
    pub fn epochs(&self) -> usize {
        self.training.epochs.unwrap_or(self.prune.total_epochs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The 3-task shared-teacher preset: every default the CLI documents.
pub fn default_config() -> ExperimentConfig {
    let task = |id: &str, seed: u64| TaskSpec {
        id: id.to_string(),
        kind: TaskKind::Classification,
        num_classes: 3,
        train_size: 4096,
        dev_size: 1024,
        seed,
        shared_fraction: 1.0,
    };
    ExperimentConfig {
        model: EncoderConfig::default(),
        prune: PruneConfig {
            selector: Selector::Movement,
            structure: Structure::ElementWise,
            scope: Scope::Local,
            final_density: 0.2,
            total_epochs: 8,
            warmup_epochs: 2,
            cooldown_epochs: 2,
            sigma_lr: 5e-3,
            update_masked_weights: false,
        },
        tasks: vec![task("task_a", 101), task("task_b", 102), task("task_c", 103)],
        mask_mode: MaskMode::Shared,
        training: TrainingConfig::default(),
        output_dir: default_output_dir(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = default_config();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value =
            serde_json::to_value(default_config()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v.clone()).is_err());
        v.as_object_mut().unwrap().remove("bogus");
        v["prune"]["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn magnitude_with_separate_masks_rejected() {
        let mut cfg = default_config();
        cfg.prune.selector = Selector::Magnitude;
        cfg.mask_mode = MaskMode::Separate;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rank_with_hybrid_masks_rejected() {
        let mut cfg = default_config();
        cfg.prune.structure = Structure::Rank;
        cfg.mask_mode = MaskMode::Hybrid;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn epoch_override_validated() {
        let mut cfg = default_config();
        cfg.training.epochs = Some(3); // 2 warmup + 2 cooldown no longer fit
        assert!(cfg.validate().is_err());
        cfg.training.epochs = Some(6);
        cfg.validate().unwrap();
        assert_eq!(cfg.epochs(), 6);
    }
}
