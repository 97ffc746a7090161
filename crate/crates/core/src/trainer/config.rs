//! Training configuration and the loss selector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{AsymConfig, FocalConfig, MlcLossConfig};
use crate::prototypes::InitMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mlc,
    Supcon,
    Bce,
    Focal,
    Asym,
}

impl LossKind {
    /// Baseline losses train through `train_baseline`, not the two stages.
    pub fn is_baseline(self) -> bool {
        !matches!(self, LossKind::Mlc)
    }

    /// Classifier baselines attach a linear logit head on z_f.
    pub fn uses_classifier_head(self) -> bool {
        matches!(self, LossKind::Bce | LossKind::Focal | LossKind::Asym)
    }
}

/// Which embedding feeds the stage-2 prototype refit buffer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefitSource {
    #[default]
    ZF,
    ZV,
    ZT,
    /// Rows from every available representation.
    Concat,
}

fn default_lr() -> f64 {
    0.0005
}
fn default_head_lr_multiplier() -> f64 {
    10.0
}
fn default_weight_decay() -> f64 {
    1e-6
}
fn default_batch_size() -> usize {
    8
}
fn default_stage1_epochs() -> usize {
    10
}
fn default_stage2_epochs() -> usize {
    40
}
fn default_refresh_interval() -> u64 {
    50
}
fn default_buffer_size() -> usize {
    4096
}
fn default_param_ema_decay() -> f64 {
    0.999
}
fn default_param_ema_interval() -> u64 {
    10
}
fn default_adam_beta1() -> f64 {
    0.9
}
fn default_adam_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_loss_weight() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate for heads and the fusion encoder; the modality
    /// backbones run at `lr / head_lr_multiplier`.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_head_lr_multiplier")]
    pub head_lr_multiplier: f64,
    /// Decoupled weight decay, applied to projection-head parameters only.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_stage1_epochs")]
    pub stage1_epochs: usize,
    #[serde(default = "default_stage2_epochs")]
    pub stage2_epochs: usize,
    /// Refit prototypes every R optimizer steps during stage 2.
    #[serde(default = "default_refresh_interval")]
    pub prototype_refresh_interval: u64,
    #[serde(default = "default_buffer_size")]
    pub prototype_buffer_size: usize,
    #[serde(default = "default_param_ema_decay")]
    pub param_ema_decay: f64,
    #[serde(default = "default_param_ema_interval")]
    pub param_ema_interval: u64,
    #[serde(default)]
    pub loss: LossKind,
    /// How prototypes are initialized before stage 1.
    #[serde(default)]
    pub prototype_init: InitMode,
    #[serde(default)]
    pub mlc: MlcLossConfig,
    #[serde(default)]
    pub focal: FocalConfig,
    #[serde(default)]
    pub asym: AsymConfig,
    /// Weight of the superclass-prototype auxiliary loss in stage 2.
    #[serde(default)]
    pub hierarchy_weight: f64,
    #[serde(default)]
    pub refit_source: RefitSource,
    /// Per-representation weights on the stage losses.
    #[serde(default = "default_loss_weight")]
    pub loss_weight_v: f64,
    #[serde(default = "default_loss_weight")]
    pub loss_weight_t: f64,
    #[serde(default = "default_loss_weight")]
    pub loss_weight_f: f64,
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Score with the EMA shadow parameters after training.
    #[serde(default = "default_true")]
    pub eval_use_ema: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(self.head_lr_multiplier > 0.0) {
            return Err(Error::config(format!(
                "head_lr_multiplier must be positive, got {}",
                self.head_lr_multiplier
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.prototype_refresh_interval < 1 {
            return Err(Error::config("prototype_refresh_interval must be at least 1"));
        }
        if self.param_ema_interval < 1 {
            return Err(Error::config("param_ema_interval must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.param_ema_decay) {
            return Err(Error::config(format!(
                "param_ema_decay must lie in [0, 1), got {}",
                self.param_ema_decay
            )));
        }
        if self.prototype_buffer_size == 0 {
            return Err(Error::config("prototype_buffer_size must be positive"));
        }
        if self.hierarchy_weight < 0.0 {
            return Err(Error::config(format!(
                "hierarchy_weight must be non-negative, got {}",
                self.hierarchy_weight
            )));
        }
        for (name, w) in [
            ("loss_weight_v", self.loss_weight_v),
            ("loss_weight_t", self.loss_weight_t),
            ("loss_weight_f", self.loss_weight_f),
        ] {
            if w < 0.0 {
                return Err(Error::config(format!("{} must be non-negative, got {}", name, w)));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{} must lie in [0, 1), got {}", name, b)));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        self.mlc.validate()?;
        self.focal.validate()?;
        self.asym.validate()?;
        Ok(())
    }
}
