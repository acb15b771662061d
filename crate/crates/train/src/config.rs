//! Training configuration.

use serde::{Deserialize, Serialize};
use tvrp_core::generate::GenParams;
use tvrp_policy::PolicyConfig;

use crate::TrainError;

/// Episode cost minimized by training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// `F = -B * eta + T / T_max`.
    Objective,
    /// Latest arrival time, for window-free single-truck routing.
    RouteTime,
}

/// Floating-point width of training rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    Double,
}

/// When the baseline parameters are replaced by the live ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineRule {
    /// Win rate that must be exceeded in consecutive epochs.
    pub threshold: f64,
    pub consecutive: usize,
    /// Win rate that triggers an update on its own.
    pub immediate: f64,
}

impl Default for BaselineRule {
    fn default() -> Self {
        Self { threshold: 0.5, consecutive: 10, immediate: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Per-epoch learning-rate factor.
    pub lr_decay: f64,
    /// Coverage weight `B` of the objective.
    pub b_coverage: f64,
    pub baseline: BaselineRule,
    /// Instances in the fixed validation set used for the win rate.
    pub validation_size: usize,
    pub seed: u64,
    pub cost: CostMode,
    pub precision: Precision,
    /// Decision cap per episode.
    pub max_steps: usize,
    /// Rescale the batch gradient to at most this norm (disabled if absent).
    pub max_grad_norm: Option<f64>,
    /// Momentum of batch-norm running statistics.
    pub bn_momentum: f64,
    /// Training instance distribution.
    pub instances: GenParams,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_epochs: 100,
            batches_per_epoch: 64,
            batch_size: 256,
            lr_initial: 2f64.powi(-23),
            lr_final: 2f64.powi(-15),
            lr_decay: 0.965,
            b_coverage: tvrp_core::B_COVERAGE,
            baseline: BaselineRule::default(),
            validation_size: 256,
            seed: 0,
            cost: CostMode::Objective,
            precision: Precision::Single,
            max_steps: 1000,
            max_grad_norm: None,
            bn_momentum: 0.9,
            instances: GenParams::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.num_epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return bad("num_epochs, batches_per_epoch and batch_size must be positive".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must lie in [0, 1), got {}", self.bn_momentum));
        }
        if matches!(self.max_grad_norm, Some(g) if g <= 0.0 || !g.is_finite()) {
            return bad("max_grad_norm must be positive".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if self.instances.num_trucks != self.policy.num_trucks {
            return bad(format!(
                "instances.num_trucks ({}) differs from policy.num_trucks ({})",
                self.instances.num_trucks, self.policy.num_trucks
            ));
        }
        self.policy.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    /// `lr_e = max(lr_initial * lr_decay^e, lr_final)` for zero-based epoch `e`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        (self.lr_initial * self.lr_decay.powi(epoch as i32)).max(self.lr_final)
    }
}
