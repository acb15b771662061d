//! Policy-gradient training with a greedy rollout baseline.

pub mod baseline;
pub mod config;
pub mod optim;
pub mod rollout;
pub mod trainer;

pub use baseline::{baseline_test, BaselineTracker};
pub use config::{BaselineRule, CostMode, Precision, TrainConfig};
pub use optim::Adam;
pub use rollout::{cost, replay_log_prob, rollout, rollout_batch, rollout_env, sample_with_tape, select, Decode, TapedEpisode};
pub use trainer::{evaluate, BatchStats, EpochStats, TrainEvent, Trainer};

use tvrp_autodiff::AutodiffError;
use tvrp_core::generate::GenError;
use tvrp_core::EnvError;
use tvrp_policy::PolicyError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("training diverged: {0}")]
    Diverged(String),
}
