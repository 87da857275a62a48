//! Minimal differentiable core: the denoiser network, a dropout MLP
//! regressor, hand-derived gradients for both, and Adam with a cosine
//! warmup schedule.
//!
//! Parameters live in one flat `Vec<f64>` whose values are kept on the
//! `f32` grid, so checkpoints (32-bit blobs) round-trip bit-exactly while
//! all arithmetic runs in double precision.

pub mod checkpoint;
pub mod denoiser;
pub mod layers;
pub mod optim;
pub mod regressor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind};
pub use denoiser::{
    denoiser_backward, denoiser_forward, time_embedding, BatchItem, Denoiser, DenoiserParams,
    Gradients, NetShape,
};
pub use optim::{adam_step, AdamState, CosineWarmup};
pub use regressor::{Regressor, RegressorShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// `[pose, time, condition]` tokens through pre-norm attention blocks.
    Transformer,
    /// Concatenated inputs through a GELU MLP.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Sum of absolute errors per sample.
    L1,
    /// Sum of squared errors per sample.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    X0,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TimestepSampling {
    /// i.i.d. uniform over `1..=T` per batch element.
    Uniform,
    /// `count` distinct timesteps per batch, assigned cyclically.
    Distinct { count: usize },
}

/// Optimization and architecture settings shared by the denoiser and the
/// dropout regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub architecture: Architecture,
    pub layers: usize,
    pub hidden_dim: usize,
    pub d_psi: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub loss_kind: LossKind,
    pub prediction_target: PredictionTarget,
    pub timestep_sampling: TimestepSampling,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            warmup_steps: 1000,
            total_steps: 30_000,
            batch_size: 64,
            architecture: Architecture::Transformer,
            layers: 8,
            hidden_dim: 128,
            d_psi: 64,
            heads: 4,
            time_dim: 32,
            loss_kind: LossKind::L1,
            prediction_target: PredictionTarget::X0,
            timestep_sampling: TimestepSampling::Uniform,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps must not exceed total_steps"));
        }
        if self.total_steps == 0
            || self.batch_size == 0
            || self.layers == 0
            || self.hidden_dim == 0
            || self.d_psi == 0
            || self.heads == 0
            || self.time_dim == 0
        {
            return Err(Error::config("all dimensions and step counts must be > 0"));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("time_dim must be even"));
        }
        if self.architecture == Architecture::Transformer && !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::config("hidden_dim must be divisible by heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        if let TimestepSampling::Distinct { count } = self.timestep_sampling {
            if count == 0 {
                return Err(Error::config("distinct timestep count must be > 0"));
            }
        }
        Ok(())
    }
}

/// Per-sample loss and its gradient w.r.t. the prediction.
pub fn loss_and_grad(kind: LossKind, pred: &[f64], target: &[f64], weight: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            match kind {
                LossKind::L1 => {
                    loss += d.abs();
                    weight
                        * if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                }
                LossKind::L2 => {
                    loss += d * d;
                    weight * 2.0 * d
                }
            }
        })
        .collect();
    (loss, grad)
}

/// Rounds every value onto the nearest `f32`.
pub(crate) fn snap_to_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_steps: 10,
            total_steps: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            hidden_dim: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn long_run_iteration_count_parses() {
        let cfg: TrainConfig = toml::from_str("total_steps = 30000\nlearning_rate = 1e-4").unwrap();
        assert_eq!(cfg.total_steps, 30_000);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn l2_quadratic_derivative() {
        let mut pred = [0.0; 7];
        pred[0] = 1.0;
        let (loss, grad) = loss_and_grad(LossKind::L2, &pred, &[0.0; 7], 1.0);
        assert_eq!(loss, 1.0);
        assert_eq!(grad[0], 2.0);
        assert!(grad[1..].iter().all(|g| *g == 0.0));
    }
}
