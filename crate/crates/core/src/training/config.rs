//! Training configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::numerics::AdamW;

/// Dropout used when a config file does not set one.
pub const DEFAULT_DROPOUT: f64 = 0.1;
/// FFN width as a multiple of the model width when not set.
pub const FFN_EXPANSION: usize = 4;
/// Norm used by `clip_norm` presets.
pub const DEFAULT_CLIP_NORM: f64 = 1.0;

/// Flat JSON training configuration. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Number of diffusion steps.
    #[serde(rename = "T")]
    pub diffusion_steps: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub seed: u64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub use_prior_loss: bool,
    /// Defaults to `FFN_EXPANSION * model_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    /// Defaults to [`DEFAULT_DROPOUT`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    /// Global gradient-norm clip; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    /// Stop at the first evaluation whose validation `L_rec` is below this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_rec: Option<f64>,
    /// Write `step-N.sdkp` every this many steps; only `last.sdkp` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    /// Fraction of scanpaths held out for validation; 0 validates on the
    /// training set.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub validation_fraction: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn reference() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-2,
            diffusion_steps: 1000,
            max_len: 16,
            layers: 6,
            heads: 8,
            model_dim: 512,
            seed: 0,
            max_steps: 100_000,
            eval_every: 1000,
            use_prior_loss: true,
            ffn_dim: None,
            dropout: None,
            clip_norm: None,
            target_rec: None,
            checkpoint_every: None,
            validation_fraction: 0.0,
        }
    }

    /// Desk-scale preset.
    pub fn toy() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-2,
            diffusion_steps: 100,
            max_len: 8,
            layers: 2,
            heads: 4,
            model_dim: 32,
            seed: 0,
            max_steps: 5000,
            eval_every: 100,
            use_prior_loss: true,
            ffn_dim: None,
            dropout: Some(0.0),
            clip_norm: None,
            target_rec: None,
            checkpoint_every: None,
            validation_fraction: 0.0,
        }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::format(path, format!("line {}: {e}", e.line())))?;
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be nonnegative", self.weight_decay));
        }
        if self.max_steps == 0 || self.eval_every == 0 {
            return bad("max_steps and eval_every must be positive".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm {c} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction {} must be in [0, 1)", self.validation_fraction));
        }
        self.denoiser(1, 1).validate()
    }

    /// Model configuration for features of the given widths.
    pub fn denoiser(&self, visual_dim: usize, task_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            layers: self.layers,
            heads: self.heads,
            model_dim: self.model_dim,
            ffn_dim: self.ffn_dim.unwrap_or(FFN_EXPANSION * self.model_dim),
            max_len: self.max_len,
            steps: self.diffusion_steps,
            visual_dim,
            task_dim,
            dropout: self.dropout.unwrap_or(DEFAULT_DROPOUT),
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    /// Whether a run with `other` may continue a run with `self`: only the
    /// step budget and the early-stop target may differ.
    pub fn resumable_as(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self {
            max_steps: 0,
            target_rec: None,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}
