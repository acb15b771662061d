//! Large-instance workflow: pick node subsets, solve them with a small
//! trained policy until all demand is met, then replay the resulting routes
//! box by box.

pub mod boxes;
pub mod execution;
pub mod provenance;
pub mod routes;
pub mod simulate;
pub mod subset;

pub use boxes::{BoxInventory, BoxItem, BoxLocation, BOX_VOLUME};
pub use execution::{execution_loop, ExecutionParams, ExecutionResult, Iteration};
pub use provenance::satisfied_by_entry;
pub use routes::{SuggestedRoutes, TruckRoute, ROUTES_VERSION};
pub use simulate::{full_scale_simulate, full_scale_simulate_with, FulfillmentReport, LoadRule, StopEvent, REPORT_VERSION};
pub use subset::{draw_subset, node_subset_search, restrict, SubProblem, SubsetChoice, SubsetSearch, RESIDUAL};

use tvrp_core::InstanceError;
use tvrp_train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error("invalid workflow parameters: {0}")]
    Config(String),
    #[error("no progress in {iterations} iterations; {remaining} volume left")]
    Stalled { iterations: usize, remaining: f64 },
    #[error("iteration limit reached after {iterations} iterations; {remaining} volume left")]
    IterationLimit { iterations: usize, remaining: f64 },
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Rollout(#[from] TrainError),
}
