//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diffusion schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.5,
        }
    }
}

/// Widths and depths of the embedding function and the denoiser.
///
/// [`ModelConfig::new`] gives the full-size network. The smaller presets keep
/// the same topology with narrower layers for tests and desk-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Size of the trainable feature-embedding table (global feature count).
    pub n_features: usize,
    /// Sinusoidal timestamp embedding width (even).
    pub time_dim: usize,
    pub feature_dim: usize,
    /// Channels produced from the observed values before concatenation.
    pub input_channels: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Output channels of each crossover branch projection.
    pub embed_channels: usize,
    pub residual_channels: usize,
    pub residual_layers: usize,
    /// Sinusoidal diffusion-step embedding width (even, at least 4).
    pub step_dim: usize,
    /// Dropout inside the attention encoders; applied only when training.
    pub dropout: f64,
    pub schedule: ScheduleConfig,
}

impl ModelConfig {
    pub fn new(n_features: usize) -> Self {
        Self {
            n_features,
            time_dim: 128,
            feature_dim: 16,
            input_channels: 16,
            heads: 8,
            ff_dim: 64,
            embed_channels: 16,
            residual_channels: 64,
            residual_layers: 4,
            step_dim: 128,
            dropout: 0.0,
            schedule: ScheduleConfig::default(),
        }
    }

    /// Narrow preset used for desk-scale training.
    pub fn tiny(n_features: usize) -> Self {
        Self {
            time_dim: 16,
            feature_dim: 4,
            input_channels: 4,
            heads: 2,
            ff_dim: 16,
            residual_channels: 16,
            step_dim: 16,
            ..Self::new(n_features)
        }
    }

    /// Smallest preset, for finite-difference gradient checks.
    pub fn micro(n_features: usize) -> Self {
        Self {
            time_dim: 8,
            feature_dim: 4,
            input_channels: 4,
            heads: 2,
            ff_dim: 8,
            embed_channels: 4,
            residual_channels: 8,
            step_dim: 8,
            schedule: ScheduleConfig {
                steps: 5,
                ..ScheduleConfig::default()
            },
            ..Self::new(n_features)
        }
    }

    /// Width of the encoder input: value channels + time + feature embeddings.
    pub fn model_width(&self) -> usize {
        self.input_channels + self.time_dim + self.feature_dim
    }

    /// Channels of the final embedding: two branch projections + mask.
    pub fn embedding_channels(&self) -> usize {
        2 * self.embed_channels + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_features == 0 {
            return bad("n_features must be positive");
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return bad("time_dim must be positive and even");
        }
        if self.step_dim < 4 || !self.step_dim.is_multiple_of(2) {
            return bad("step_dim must be even and at least 4");
        }
        if self.heads == 0 || !self.model_width().is_multiple_of(self.heads) {
            return bad("model width must be divisible by heads");
        }
        if [
            self.feature_dim,
            self.input_channels,
            self.ff_dim,
            self.embed_channels,
            self.residual_channels,
            self.residual_layers,
        ]
        .contains(&0)
        {
            return bad("layer widths and depth must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        let s = &self.schedule;
        if s.steps < 2 || !(0.0 < s.beta_min && s.beta_min < s.beta_max && s.beta_max < 1.0) {
            return bad("schedule needs steps >= 2 and 0 < beta_min < beta_max < 1");
        }
        Ok(())
    }
}
