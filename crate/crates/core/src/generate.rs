//! Seeded instance generators.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demand::Node;
use crate::instance::{euclidean_times, itinerary_allowed, DemandEntry, Instance, InstanceError};

/// How the driving window of a generated instance is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Window {
    /// `factor * mean pairwise time * n / num_trucks`.
    Scaled { factor: f64 },
    Fixed { value: f64 },
    Unbounded,
}

/// Parameters of [`random_instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub n: usize,
    /// Probability that an allowed tuple of rank 2 / rank 3 is admitted by
    /// the mask tensor.
    pub rank_probs: [f64; 2],
    /// Probability that an admitted tuple keeps its volume.
    pub density: f64,
    /// Volumes are uniform on `(lo, hi]`.
    pub demand_range: [f64; 2],
    /// Cyclic demand (the default) or direct demand.
    pub cyclic: bool,
    pub num_trucks: usize,
    pub window: Window,
    /// Start node per truck; empty means node 0 for every truck.
    pub start_nodes: Vec<Node>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            n: 10,
            rank_probs: [1.0, 1.0],
            density: 1.0,
            demand_range: [0.0, 0.5],
            cyclic: true,
            num_trucks: 1,
            window: Window::Scaled { factor: 3.0 },
            start_nodes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenError {
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("no allowed demand tuple exists for n = {n} with the enabled ranks")]
    NoAllowedTuple { n: usize },
    #[error("{name} = {value} is out of range")]
    BadParam { name: &'static str, value: f64 },
    #[error("no nonzero demand after {0} draws; raise density or rank probabilities")]
    Exhausted(usize),
    #[error("cannot draw {want} distinct tuples, only {have} are allowed")]
    TooManyPaths { want: usize, have: usize },
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

const MAX_REDRAWS: usize = 1000;

/// All allowed itineraries of rank `r` over `n` nodes, in lexicographic order.
pub fn allowed_tuples(n: usize, r: usize, cyclic: bool) -> Vec<Vec<Node>> {
    let mut out = Vec::new();
    match r {
        2 => {
            for i in 0..n {
                for j in 0..n {
                    if itinerary_allowed(&[i, j], cyclic, n) {
                        out.push(vec![i, j]);
                    }
                }
            }
        }
        3 => {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        if itinerary_allowed(&[i, j, k], cyclic, n) {
                            out.push(vec![i, j, k]);
                        }
                    }
                }
            }
        }
        _ => {}
    }
    out
}

fn window_value(window: Window, time: &[Vec<f64>], num_trucks: usize) -> Result<f64, GenError> {
    match window {
        Window::Unbounded => Ok(f64::INFINITY),
        Window::Fixed { value } if value > 0.0 => Ok(value),
        Window::Fixed { value } => Err(GenError::BadParam { name: "window.value", value }),
        Window::Scaled { factor } if factor > 0.0 => {
            let n = time.len();
            let total: f64 = time.iter().flatten().sum();
            let mean = total / (n * (n - 1)) as f64;
            Ok(factor * mean * n as f64 / num_trucks.max(1) as f64)
        }
        Window::Scaled { factor } => Err(GenError::BadParam { name: "window.factor", value: factor }),
    }
}

/// Random instance: uniform coordinates in the unit square, Euclidean
/// times, and off-board demand on a randomly masked set of allowed tuples.
/// Draws with zero total demand are repeated.
pub fn random_instance(params: &GenParams, seed: u64) -> Result<Instance, GenError> {
    let n = params.n;
    if n < 2 {
        return Err(GenError::TooFewNodes(n));
    }
    for (name, value) in [("rank_probs[0]", params.rank_probs[0]), ("rank_probs[1]", params.rank_probs[1])] {
        if !(0.0..=1.0).contains(&value) {
            return Err(GenError::BadParam { name, value });
        }
    }
    if !(params.density > 0.0 && params.density <= 1.0) {
        return Err(GenError::BadParam { name: "density", value: params.density });
    }
    let [lo, hi] = params.demand_range;
    if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
        return Err(GenError::BadParam { name: "demand_range", value: hi });
    }
    let candidates: Vec<(Vec<Node>, f64)> = [2usize, 3]
        .iter()
        .zip(params.rank_probs)
        .filter(|(_, p)| *p > 0.0)
        .flat_map(|(&r, p)| allowed_tuples(n, r, params.cyclic).into_iter().map(move |t| (t, p)))
        .collect();
    if candidates.is_empty() {
        return Err(GenError::NoAllowedTuple { n });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_REDRAWS {
        let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let mut demand = Vec::new();
        for (nodes, p) in &candidates {
            // one draw per decision keeps the stream layout independent of outcomes
            let admit = rng.gen::<f64>() < *p;
            let keep = rng.gen::<f64>() < params.density;
            let u: f64 = rng.gen();
            if admit && keep {
                let volume = lo + (hi - lo) * (1.0 - u);
                demand.push(DemandEntry { nodes: nodes.clone(), cyclic: params.cyclic, volume });
            }
        }
        if demand.is_empty() {
            continue;
        }
        let time = euclidean_times(&coords, 1.0);
        let t_max = window_value(params.window, &time, params.num_trucks)?;
        return Ok(Instance::new(coords, time, demand, t_max, params.start_nodes.clone())?);
    }
    Err(GenError::Exhausted(MAX_REDRAWS))
}

/// Parameters of [`synthetic_avrp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvrpParams {
    pub n: usize,
    pub num_paths: usize,
    /// Share of rank-3 paths among the drawn paths.
    pub rank3_share: f64,
    /// Driving window in hours.
    pub window_hours: f64,
    /// Hours per unit of Euclidean distance.
    pub hours_per_unit: f64,
    /// Target ratio of the single-truck volume-time bound to the window.
    pub load_factor: f64,
}

impl Default for AvrpParams {
    fn default() -> Self {
        Self { n: 21, num_paths: 107, rank3_share: 0.5, window_hours: 16.0, hours_per_unit: 2.0, load_factor: 3.0 }
    }
}

/// Lower bound on single-truck driving time: each unit of volume rides its
/// whole cycle and a truck carries at most one unit at a time. Valid for
/// metric time matrices.
pub fn volume_time_bound(instance: &Instance) -> f64 {
    instance
        .demand()
        .iter()
        .map(|e| e.volume * e.legs().iter().map(|&(a, b)| instance.time(a, b)).sum::<f64>())
        .sum()
}

/// Synthetic stand-in for a plant logistics network: `num_paths` distinct
/// cyclic box paths of rank 2 or 3 over `n` nodes, times in hours and a
/// window of `window_hours`. Volumes are scaled until the volume-time bound
/// equals `load_factor` windows.
pub fn synthetic_avrp(params: &AvrpParams, seed: u64) -> Result<Instance, GenError> {
    let n = params.n;
    if n < 3 {
        return Err(GenError::TooFewNodes(n));
    }
    if !(0.0..=1.0).contains(&params.rank3_share) {
        return Err(GenError::BadParam { name: "rank3_share", value: params.rank3_share });
    }
    for (name, value) in [
        ("window_hours", params.window_hours),
        ("hours_per_unit", params.hours_per_unit),
        ("load_factor", params.load_factor),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(GenError::BadParam { name, value });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = allowed_tuples(n, 2, true);
    let mut triples = allowed_tuples(n, 3, true);
    let want3 = (params.num_paths as f64 * params.rank3_share).round() as usize;
    let want2 = params.num_paths - want3;
    if want2 > pairs.len() || want3 > triples.len() {
        return Err(GenError::TooManyPaths { want: params.num_paths, have: pairs.len() + triples.len() });
    }
    pairs.shuffle(&mut rng);
    triples.shuffle(&mut rng);
    let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
    let demand: Vec<DemandEntry> = pairs
        .into_iter()
        .take(want2)
        .chain(triples.into_iter().take(want3))
        .map(|nodes| DemandEntry::cyclic(&nodes, rng.gen_range(0.2..1.0)))
        .collect();
    let time = euclidean_times(&coords, params.hours_per_unit);
    let raw = Instance::new(coords.clone(), time.clone(), demand, params.window_hours, Vec::new())?;
    let scale = params.load_factor * params.window_hours / volume_time_bound(&raw);
    let demand = raw.demand().iter().map(|e| DemandEntry { volume: e.volume * scale, ..e.clone() }).collect();
    Ok(Instance::new(coords, time, demand, params.window_hours, Vec::new())?)
}
