//! Attention encoder-decoder policy for multi-truck tensor-demand routing.
//!
//! The encoder embeds node coordinates together with myopic initial demand;
//! the decoder extends the embeddings with current demand, attends from a
//! context node describing the fleet, and emits a masked distribution over
//! the active truck's next node.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod layers;
pub mod model;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DemandMechanism, PolicyConfig};
pub use gradcheck::check_policy_gradients;
pub use layers::{dynamical_mask_g, BnObservation, Gate, NormMode, RunMode, LOG_FLOOR, TENSOR_VALUE_LIMIT};
pub use model::{slot_order, DemandView, Encoded, Policy};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error(
        "tensor attention over {nodes} nodes at rank {rank} needs {values} values \
         (n^{rank} tuples of width {rank}x{width}), above the limit of {limit}"
    )]
    TensorTooLarge { nodes: usize, rank: usize, width: usize, values: usize, limit: usize },
    #[error("policy is built for {expected} trucks, observation has {got}")]
    TruckCount { expected: usize, got: usize },
    #[error("every node is masked")]
    AllMasked,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}
