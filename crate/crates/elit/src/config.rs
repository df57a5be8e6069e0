//! Run configuration: one TOML file describes a whole experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{PaddedVariantSpec, ToyDatasetSpec};
use crate::error::{Error, Result};
use crate::flow::TimestepDistribution;
use crate::guidance::{GuidanceMode, GuidanceSpec};
use crate::latent::{BudgetSpec, DropStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub location: f64,
    pub scale: f64,
    pub sampler_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            location: 0.0,
            scale: 1.0,
            sampler_steps: 40,
        }
    }
}

impl FlowConfig {
    pub fn distribution(&self) -> TimestepDistribution {
        TimestepDistribution {
            location: self.location,
            scale: self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub ema_beta: f64,
    pub seed: u64,
    pub drop_strategy: DropStrategy,
    pub log_every: u64,
    /// Held-out pairs for the paired per-budget evaluation.
    pub eval_samples: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 5000,
            batch_size: 8,
            lr: 1e-4,
            warmup_frac: 0.05,
            grad_clip: 1.0,
            ema_beta: 0.999,
            seed: 0,
            drop_strategy: DropStrategy::Tail,
            log_every: 50,
            eval_samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub flow: FlowConfig,
    pub budget: BudgetSpec,
    pub guidance: GuidanceSpec,
    pub dataset: ToyDatasetSpec,
    pub padded: Option<PaddedVariantSpec>,
    pub training: TrainingConfig,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let j = backbone.latents_per_group;
        RunConfig {
            backbone,
            flow: FlowConfig::default(),
            budget: BudgetSpec { j_min: 4, j_max: j },
            guidance: GuidanceSpec {
                mode: GuidanceMode::None,
                lambda: 0.0,
                j_main: j,
                j_weak: j,
            },
            dataset: ToyDatasetSpec::default(),
            padded: None,
            training: TrainingConfig::default(),
            output_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    /// Eager cross-field validation; every message names the offending
    /// field.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.flow.distribution().validate()?;
        if self.flow.sampler_steps == 0 {
            return Err(Error::config("flow.sampler_steps must be >= 1"));
        }
        if self.backbone.latent_enabled {
            if self.budget.j_min < 1 || self.budget.j_min > self.budget.j_max {
                return Err(Error::config(format!(
                    "budget.j_min: need 1 <= j_min ({}) <= j_max ({})",
                    self.budget.j_min, self.budget.j_max
                )));
            }
            if self.budget.j_max > self.backbone.latents_per_group {
                return Err(Error::config(format!(
                    "budget.j_max: {} exceeds backbone.latents_per_group {}",
                    self.budget.j_max, self.backbone.latents_per_group
                )));
            }
            self.guidance.validate()?;
            if self.guidance.j_main > self.budget.j_max {
                return Err(Error::config(format!(
                    "guidance.j_main: {} outside trained budget range {}..={}",
                    self.guidance.j_main, self.budget.j_min, self.budget.j_max
                )));
            }
        }
        if self.dataset.image_size != self.backbone.image_size && self.padded.is_none() {
            return Err(Error::config(format!(
                "dataset.image_size: {} does not match backbone.image_size {}",
                self.dataset.image_size, self.backbone.image_size
            )));
        }
        if let Some(p) = &self.padded {
            let side = p.side()?;
            if self.dataset.image_size * side != self.backbone.image_size {
                return Err(Error::config(format!(
                    "padded.pad_factor: dataset {}px times side {side} != backbone {}px",
                    self.dataset.image_size, self.backbone.image_size
                )));
            }
        }
        if self.dataset.channels != self.backbone.channels {
            return Err(Error::config(format!(
                "dataset.channels: {} does not match backbone.channels {}",
                self.dataset.channels, self.backbone.channels
            )));
        }
        if self.dataset.num_classes != self.backbone.num_classes {
            return Err(Error::config(format!(
                "dataset.num_classes: {} does not match backbone.num_classes {}",
                self.dataset.num_classes, self.backbone.num_classes
            )));
        }
        self.dataset.validate()?;
        let t = &self.training;
        if t.steps == 0 || t.batch_size == 0 {
            return Err(Error::config("training.steps and training.batch_size must be >= 1"));
        }
        if t.lr <= 0.0 {
            return Err(Error::config(format!("training.lr must be positive, got {}", t.lr)));
        }
        if !(0.0..=1.0).contains(&t.warmup_frac) {
            return Err(Error::config(format!(
                "training.warmup_frac must be in [0, 1], got {}",
                t.warmup_frac
            )));
        }
        if t.grad_clip <= 0.0 {
            return Err(Error::config(format!(
                "training.grad_clip must be positive, got {}",
                t.grad_clip
            )));
        }
        if !(0.0..1.0).contains(&t.ema_beta) {
            return Err(Error::config(format!(
                "training.ema_beta must be in [0, 1), got {}",
                t.ema_beta
            )));
        }
        if t.log_every == 0 {
            return Err(Error::config("training.log_every must be >= 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
