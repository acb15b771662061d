//! Node-subset selection and restriction of demand to a subset.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tvrp_core::{derive_seed, DemandEntry, EnvConfig, Instance, Node};
use tvrp_policy::Policy;
use tvrp_train::{rollout, Decode};

use crate::WorkflowError;

/// Entries at or below this volume count as exhausted.
pub const RESIDUAL: f64 = 1e-9;

/// Demand of a large instance restricted to a node subset and renumbered.
#[derive(Debug, Clone)]
pub struct SubProblem {
    pub instance: Arc<Instance>,
    /// Local node id to original node id (ascending).
    pub nodes: Vec<Node>,
    /// Local demand entry to index into the remaining-demand list.
    pub entries: Vec<usize>,
}

/// One random subset of `n_prime` nodes: nonzero tuples are drawn without
/// replacement and their nodes unioned; a tuple that would push the set past
/// `n_prime` is dropped again and drawing continues. If the tuples run out
/// first, uniformly random outside nodes fill the set.
pub fn draw_subset(demand: &[DemandEntry], n: usize, n_prime: usize, rng: &mut ChaCha8Rng) -> Vec<Node> {
    let mut tuples: Vec<&DemandEntry> = demand.iter().filter(|e| e.volume > RESIDUAL).collect();
    tuples.shuffle(rng);
    let mut set = BTreeSet::new();
    for t in tuples {
        if set.len() == n_prime {
            break;
        }
        let mut grown = set.clone();
        grown.extend(t.nodes.iter().copied());
        if grown.len() <= n_prime {
            set = grown;
        }
    }
    if set.len() < n_prime {
        let mut outside: Vec<Node> = (0..n).filter(|i| !set.contains(i)).collect();
        outside.shuffle(rng);
        let need = n_prime - set.len();
        set.extend(outside.into_iter().take(need));
    }
    set.into_iter().collect()
}

/// Restricts `demand` to tuples lying inside `nodes`, clipping each volume
/// at `clip`. Returns `None` when no demand is supported by the subset.
pub fn restrict(
    base: &Instance,
    demand: &[DemandEntry],
    nodes: &[Node],
    clip: f64,
) -> Result<Option<SubProblem>, WorkflowError> {
    let local = |g: Node| nodes.iter().position(|&x| x == g);
    let mut entries = Vec::new();
    let mut sub = Vec::new();
    for (i, e) in demand.iter().enumerate() {
        if e.volume <= RESIDUAL {
            continue;
        }
        let mapped: Option<Vec<Node>> = e.nodes.iter().map(|&g| local(g)).collect();
        if let Some(mapped) = mapped {
            entries.push(i);
            sub.push(DemandEntry { nodes: mapped, cyclic: e.cyclic, volume: e.volume.min(clip) });
        }
    }
    if sub.is_empty() {
        return Ok(None);
    }
    let coords = nodes.iter().map(|&g| base.coords()[g]).collect();
    let time = nodes.iter().map(|&a| nodes.iter().map(|&b| base.time(a, b)).collect()).collect();
    let instance = Instance::new(coords, time, sub, base.t_max(), Vec::new())?;
    Ok(Some(SubProblem { instance: Arc::new(instance), nodes: nodes.to_vec(), entries }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetChoice {
    pub nodes: Vec<Node>,
    /// Mean coverage over the sampled attempts.
    pub mean_coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetSearch {
    pub n_prime: usize,
    pub num_trucks: usize,
    pub k_node_draws: usize,
    pub k_subset_attempts: usize,
    pub clip: f64,
    pub max_steps: usize,
}

/// Draws `k_node_draws` subsets, scores each by the mean coverage of
/// `k_subset_attempts` sampled rollouts, and returns the best (first on
/// ties). `Ok(None)` means no demand is left.
pub fn node_subset_search(
    base: &Instance,
    demand: &[DemandEntry],
    params: &SubsetSearch,
    policy: &Policy,
    seed: u64,
) -> Result<Option<SubsetChoice>, WorkflowError> {
    if !demand.iter().any(|e| e.volume > RESIDUAL) {
        return Ok(None);
    }
    let n = base.num_nodes();
    if params.n_prime >= n {
        return Err(WorkflowError::Config(format!("subset size {} must be below the node count {n}", params.n_prime)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    let subsets: Vec<Vec<Node>> = (0..params.k_node_draws).map(|_| draw_subset(demand, n, params.n_prime, &mut rng)).collect();
    let env = EnvConfig { num_trucks: params.num_trucks, max_steps: params.max_steps, record_events: false };
    let mut best: Option<SubsetChoice> = None;
    for (s, nodes) in subsets.into_iter().enumerate() {
        let Some(sub) = restrict(base, demand, &nodes, params.clip)? else {
            // supports no demand: only chosen when nothing else is available
            if best.is_none() {
                best = Some(SubsetChoice { nodes, mean_coverage: f64::NEG_INFINITY });
            }
            continue;
        };
        let cov = (0..params.k_subset_attempts)
            .into_par_iter()
            .map(|a| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 + s as u64, a as u64));
                rollout::<f32>(policy, &sub.instance, env, Decode::Sample, &mut rng, tvrp_core::B_COVERAGE).map(|r| r.eta)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mean = cov.iter().sum::<f64>() / cov.len().max(1) as f64;
        if best.as_ref().map_or(true, |b| mean > b.mean_coverage) {
            best = Some(SubsetChoice { nodes, mean_coverage: mean });
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(tuples: &[&[Node]]) -> Vec<DemandEntry> {
        tuples.iter().map(|t| DemandEntry::cyclic(t, 0.1)).collect()
    }

    #[test]
    fn single_triple_is_forced() {
        let d = entries(&[&[1, 2, 3]]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(draw_subset(&d, 8, 3, &mut rng), vec![1, 2, 3]);
        }
    }

    #[test]
    fn exhausted_tuples_are_padded() {
        let d = entries(&[&[0, 1, 2], &[2, 3]]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = draw_subset(&d, 9, 6, &mut rng);
        assert_eq!(a.len(), 6);
        assert!([0, 1, 2, 3].iter().all(|x| a.contains(x)));
    }

    #[test]
    fn shared_nodes_count_once() {
        let d = entries(&[&[3, 4, 6], &[7, 3, 8]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // both tuples fit in six slots; their union has five nodes
        let a = draw_subset(&d, 12, 6, &mut rng);
        assert!([3, 4, 6, 7, 8].iter().all(|x| a.contains(x)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw_subset(&d, 12, 5, &mut rng), vec![3, 4, 6, 7, 8]);
    }

    #[test]
    fn overflowing_tuple_is_dropped() {
        let d = entries(&[&[0, 1, 2], &[3, 4, 5]]);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = draw_subset(&d, 6, 4, &mut rng);
            let first = a.iter().filter(|&&x| x < 3).count();
            let second = a.iter().filter(|&&x| (3..6).contains(&x)).count();
            assert!(first == 3 || second == 3, "{a:?}");
            assert_eq!(a.len(), 4);
        }
    }

    #[test]
    fn restriction_clips_and_renumbers() {
        let demand = vec![DemandEntry::cyclic(&[4, 1], 2.5), DemandEntry::cyclic(&[1, 2, 3], 0.2), DemandEntry::cyclic(&[1, 4, 0], 0.3)];
        let coords: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, 0.0]).collect();
        let base = Instance::euclidean(coords, 1.0, demand.clone(), 20.0, vec![]).unwrap();
        let sub = restrict(&base, &demand, &[1, 2, 4], 1.0).unwrap().unwrap();
        assert_eq!(sub.entries, vec![0]);
        assert_eq!(sub.instance.demand(), &[DemandEntry::cyclic(&[2, 0], 1.0)]);
        assert_eq!(sub.instance.time(0, 2), 3.0);
        assert_eq!(sub.instance.t_max(), 20.0);
        assert!(restrict(&base, &demand, &[2, 3], 1.0).unwrap().is_none());
    }
}
