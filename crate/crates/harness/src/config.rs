//! Training configuration as read from `cfg.json`.

use std::path::{Path, PathBuf};

use misra::losses::{LossCoefficients, WeightMode};
use misra::mask::NUM_CLASSES;
use misra::model::{ModelConfig, SkipAttention};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Every field is optional in the file; omitted ones take the desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory written by `gen-synth`.
    pub data: PathBuf,
    /// Directory for the loss CSV and checkpoints.
    pub out: PathBuf,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Feedback iterations `T`.
    pub iterations: usize,
    /// Base of the per-iteration weights `w * (t + 1)`.
    pub w: f64,
    pub class_weight_mode: WeightMode,
    pub use_ftl: bool,
    pub use_ifl: bool,
    pub base_width: usize,
    pub use_luma_channels: bool,
    pub skip_attention: SkipAttention,
    pub use_ifm: bool,
    pub seed: u64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    /// Write a checkpoint after every epoch (the final one is always written).
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// 64x64 scenes, base width 16, 30 epochs.
    pub fn desk() -> Self {
        Self {
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
            lr: 5e-4,
            weight_decay: 1e-3,
            epochs: 30,
            batch_size: 4,
            iterations: 3,
            w: 0.1,
            class_weight_mode: WeightMode::Nmfb,
            use_ftl: true,
            use_ifl: true,
            base_width: 16,
            use_luma_channels: true,
            skip_attention: SkipAttention::Default,
            use_ifm: true,
            seed: 0,
            grad_clip: 5.0,
            checkpoint_every_epoch: true,
        }
    }

    /// Full-width network and 100 epochs.
    pub fn paper() -> Self {
        Self { epochs: 100, base_width: 48, ..Self::desk() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("w", self.w)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(HarnessError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(HarnessError::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(HarnessError::Config(format!("grad_clip must be non-negative, got {}", self.grad_clip)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HarnessError::Config("epochs and batch_size must be positive".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: NUM_CLASSES,
            base_width: self.base_width,
            iterations: self.iterations,
            use_luma_channels: self.use_luma_channels,
            skip_attention: self.skip_attention,
            use_ifm: self.use_ifm,
        }
    }

    pub fn loss_coefficients(&self) -> LossCoefficients {
        LossCoefficients { use_ftl: self.use_ftl, use_ifl: self.use_ifl, ..LossCoefficients::default() }
    }
}
