//! Iterated small-scale solving of a large instance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tvrp_core::{derive_seed, DemandEntry, EnvConfig, Instance, Node};
use tvrp_policy::Policy;
use tvrp_train::{rollout_env, Decode};

use crate::provenance::satisfied_by_entry;
use crate::routes::{SuggestedRoutes, TruckRoute};
use crate::subset::{node_subset_search, restrict, SubsetSearch, RESIDUAL};
use crate::WorkflowError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionParams {
    /// Nodes per subproblem.
    pub n_prime: usize,
    /// Trucks per subproblem.
    pub num_trucks: usize,
    /// Per-component cap on subproblem demand.
    pub clip: f64,
    pub k_node_draws: usize,
    pub k_subset_attempts: usize,
    pub k_execution_trials: usize,
    /// Consecutive iterations without progress before giving up.
    pub k_stall: usize,
    pub max_iterations: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for ExecutionParams {
    fn default() -> Self {
        Self {
            n_prime: 10,
            num_trucks: 3,
            clip: 1.0,
            k_node_draws: 8,
            k_subset_attempts: 4,
            k_execution_trials: 16,
            k_stall: 5,
            max_iterations: 10_000,
            max_steps: 1000,
            seed: 0,
        }
    }
}

impl ExecutionParams {
    pub fn validate(&self) -> Result<(), WorkflowError> {
        let bad = |m: &str| Err(WorkflowError::Config(m.into()));
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.n_prime < 2 || self.num_trucks == 0 {
            return bad("n_prime must be at least 2 and num_trucks positive");
        }
        if self.k_node_draws == 0 || self.k_subset_attempts == 0 || self.k_execution_trials == 0 {
            return bad("k_node_draws, k_subset_attempts and k_execution_trials must be positive");
        }
        if self.k_stall == 0 || self.max_iterations == 0 || self.max_steps == 0 {
            return bad("k_stall, max_iterations and max_steps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub subset: Vec<Node>,
    pub subset_score: f64,
    /// Coverage of the kept trial on its clipped subproblem.
    pub trial_coverage: f64,
    /// Original demand volume removed by the kept trial.
    pub satisfied: f64,
    pub routes: Vec<TruckRoute>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub iterations: Vec<Iteration>,
    /// Global coverage after each iteration.
    pub coverage_trace: Vec<f64>,
    pub routes: SuggestedRoutes,
    /// Iterations times trucks per subproblem.
    pub total_trucks: usize,
    pub max_route_time: f64,
    pub remaining: Vec<DemandEntry>,
}

impl ExecutionResult {
    pub fn coverage(&self) -> f64 {
        self.coverage_trace.last().copied().unwrap_or(0.0)
    }
}

/// Repeats subset search and the best of `k_execution_trials` sampled
/// rollouts, removing what each kept trial satisfied, until no demand is
/// left.
pub fn execution_loop(instance: &Instance, policy: &Policy, params: &ExecutionParams) -> Result<ExecutionResult, WorkflowError> {
    params.validate()?;
    if policy.config().num_trucks != params.num_trucks {
        return Err(WorkflowError::Config(format!(
            "policy drives {} trucks, execution asks for {}",
            policy.config().num_trucks,
            params.num_trucks
        )));
    }
    let initial = instance.initial_total();
    let mut remaining: Vec<DemandEntry> = instance.demand().to_vec();
    let search = SubsetSearch {
        n_prime: params.n_prime,
        num_trucks: params.num_trucks,
        k_node_draws: params.k_node_draws,
        k_subset_attempts: params.k_subset_attempts,
        clip: params.clip,
        max_steps: params.max_steps,
    };
    let env = EnvConfig { num_trucks: params.num_trucks, max_steps: params.max_steps, record_events: true };
    let mut iterations = Vec::new();
    let mut trace = Vec::new();
    let mut routes = SuggestedRoutes::default();
    let mut stall = 0;
    for it in 0..params.max_iterations {
        let iter_seed = derive_seed(params.seed, it as u64, 0);
        let Some(choice) = node_subset_search(instance, &remaining, &search, policy, derive_seed(iter_seed, 0, 0))? else {
            break;
        };
        let sub = restrict(instance, &remaining, &choice.nodes, params.clip)?;
        let (trial_coverage, satisfied, trial_routes) = match &sub {
            None => (0.0, Vec::new(), Vec::new()),
            Some(sub) => {
                let trials = (0..params.k_execution_trials)
                    .into_par_iter()
                    .map(|k| {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(iter_seed, 1, k as u64));
                        rollout_env::<f32>(policy, &sub.instance, env, Decode::Sample, &mut rng)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let mut best = 0;
                for (k, t) in trials.iter().enumerate() {
                    if t.coverage() > trials[best].coverage() {
                        best = k;
                    }
                }
                let kept = &trials[best];
                let by_entry = satisfied_by_entry(&sub.instance, kept.events());
                let record = kept.record(tvrp_core::B_COVERAGE);
                (kept.coverage(), by_entry, SuggestedRoutes::from_record(&record, &sub.nodes))
            }
        };
        let mut removed = 0.0;
        if let Some(sub) = &sub {
            for (local, &global) in sub.entries.iter().enumerate() {
                let take = satisfied[local].min(remaining[global].volume);
                remaining[global].volume -= take;
                removed += take;
                if remaining[global].volume <= RESIDUAL {
                    remaining[global].volume = 0.0;
                }
            }
        }
        let left: f64 = remaining.iter().map(|e| e.volume).sum();
        trace.push(1.0 - left / initial);
        routes.trucks.extend(trial_routes.iter().cloned());
        iterations.push(Iteration {
            subset: choice.nodes,
            subset_score: choice.mean_coverage,
            trial_coverage,
            satisfied: removed,
            routes: trial_routes,
        });
        stall = if removed > RESIDUAL { 0 } else { stall + 1 };
        if stall >= params.k_stall {
            return Err(WorkflowError::Stalled { iterations: iterations.len(), remaining: left });
        }
    }
    let left: f64 = remaining.iter().map(|e| e.volume).sum();
    if left > 0.0 {
        return Err(WorkflowError::IterationLimit { iterations: iterations.len(), remaining: left });
    }
    Ok(ExecutionResult {
        total_trucks: iterations.len() * params.num_trucks,
        max_route_time: routes.max_route_time(instance),
        iterations,
        coverage_trace: trace,
        routes,
        remaining,
    })
}
