//! Problem instances: node layout, time matrix, initial demand and the
//! driving window.

use serde::{Deserialize, Serialize};

use crate::demand::{Component, DemandState, Node, Truck};

/// One sparse entry of initial off-board demand.
///
/// `nodes` is the itinerary (rank 2 or 3). A cyclic entry additionally
/// returns to `nodes[0]` after the last stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandEntry {
    pub nodes: Vec<Node>,
    pub cyclic: bool,
    pub volume: f64,
}

impl DemandEntry {
    pub fn cyclic(nodes: &[Node], volume: f64) -> Self {
        Self { nodes: nodes.to_vec(), cyclic: true, volume }
    }

    pub fn direct(nodes: &[Node], volume: f64) -> Self {
        Self { nodes: nodes.to_vec(), cyclic: false, volume }
    }

    pub fn rank(&self) -> usize {
        self.nodes.len()
    }

    /// The demand-state slot this entry seeds.
    pub fn component(&self) -> Option<Component> {
        match (self.nodes.as_slice(), self.cyclic) {
            (&[i, j], true) => Some(Component::Cyclic2(i, j)),
            (&[i, j], false) => Some(Component::Direct2(i, j)),
            (&[i, j, k], true) => Some(Component::Cyclic3(i, j, k)),
            (&[i, j, k], false) => Some(Component::Direct3(i, j, k)),
            _ => None,
        }
    }

    /// Every leg the volume still has to travel, including the implied
    /// return leg of a cyclic entry.
    pub fn legs(&self) -> Vec<(Node, Node)> {
        let mut legs: Vec<(Node, Node)> = self.nodes.windows(2).map(|w| (w[0], w[1])).collect();
        if self.cyclic {
            legs.push((*self.nodes.last().unwrap(), self.nodes[0]));
        }
        legs
    }
}

/// Checks the index pattern of an itinerary for `n` nodes.
pub fn itinerary_allowed(nodes: &[Node], cyclic: bool, n: usize) -> bool {
    if !(2..=3).contains(&nodes.len()) || nodes.iter().any(|&v| v >= n) {
        return false;
    }
    if nodes.windows(2).any(|w| w[0] == w[1]) {
        return false;
    }
    !(cyclic && nodes.len() == 3 && nodes[2] == nodes[0])
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InstanceError {
    #[error("instance has no nodes")]
    Empty,
    #[error("coordinates list {coords} nodes but the time matrix is {rows}x{cols}")]
    Shape { coords: usize, rows: usize, cols: usize },
    #[error("time matrix diagonal entry ({0},{0}) must be 0")]
    NonzeroDiagonal(usize),
    #[error("time matrix entry ({i},{j}) = {value} must be finite and nonnegative")]
    BadTime { i: usize, j: usize, value: f64 },
    #[error("coordinate of node {0} is not finite")]
    BadCoord(usize),
    #[error("demand entry {index}: {reason}")]
    BadDemand { index: usize, reason: String },
    #[error("total initial demand is zero")]
    ZeroDemand,
    #[error("driving window must be positive, got {0}")]
    BadWindow(f64),
    #[error("start node {node} of truck {truck} is out of range")]
    BadStart { truck: Truck, node: Node },
}

/// A routing instance. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    coords: Vec<[f64; 2]>,
    time: Vec<f64>,
    demand: Vec<DemandEntry>,
    t_max: f64,
    start_nodes: Vec<Node>,
}

impl Instance {
    /// Validates and builds an instance. `t_max = f64::INFINITY` means no
    /// driving window. Duplicate demand entries are merged.
    pub fn new(
        coords: Vec<[f64; 2]>,
        time_rows: Vec<Vec<f64>>,
        demand: Vec<DemandEntry>,
        t_max: f64,
        start_nodes: Vec<Node>,
    ) -> Result<Self, InstanceError> {
        let n = coords.len();
        if n == 0 {
            return Err(InstanceError::Empty);
        }
        if time_rows.len() != n || time_rows.iter().any(|r| r.len() != n) {
            return Err(InstanceError::Shape {
                coords: n,
                rows: time_rows.len(),
                cols: time_rows.first().map_or(0, Vec::len),
            });
        }
        if let Some(i) = coords.iter().position(|c| !(c[0].is_finite() && c[1].is_finite())) {
            return Err(InstanceError::BadCoord(i));
        }
        for (i, row) in time_rows.iter().enumerate() {
            for (j, &value) in row.iter().enumerate() {
                if !(value.is_finite() && value >= 0.0) {
                    return Err(InstanceError::BadTime { i, j, value });
                }
            }
            if row[i] != 0.0 {
                return Err(InstanceError::NonzeroDiagonal(i));
            }
        }
        if !(t_max > 0.0) {
            return Err(InstanceError::BadWindow(t_max));
        }
        for (truck, &node) in start_nodes.iter().enumerate() {
            if node >= n {
                return Err(InstanceError::BadStart { truck, node });
            }
        }
        let demand = canonical_demand(demand, n)?;
        if demand.iter().map(|e| e.volume).sum::<f64>() <= 0.0 {
            return Err(InstanceError::ZeroDemand);
        }
        Ok(Self { coords, time: time_rows.concat(), demand, t_max, start_nodes })
    }

    /// Instance whose time matrix is the Euclidean distance between nodes,
    /// scaled by `time_per_unit`.
    pub fn euclidean(
        coords: Vec<[f64; 2]>,
        time_per_unit: f64,
        demand: Vec<DemandEntry>,
        t_max: f64,
        start_nodes: Vec<Node>,
    ) -> Result<Self, InstanceError> {
        let rows = euclidean_times(&coords, time_per_unit);
        Self::new(coords, rows, demand, t_max, start_nodes)
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    #[inline]
    pub fn time(&self, i: Node, j: Node) -> f64 {
        self.time[i * self.coords.len() + j]
    }

    pub fn time_rows(&self) -> Vec<Vec<f64>> {
        self.time.chunks(self.coords.len()).map(<[f64]>::to_vec).collect()
    }

    pub fn demand(&self) -> &[DemandEntry] {
        &self.demand
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn has_window(&self) -> bool {
        self.t_max.is_finite()
    }

    pub fn start_nodes(&self) -> &[Node] {
        &self.start_nodes
    }

    /// Start node of a truck; node 0 when not listed.
    pub fn start_node(&self, truck: Truck) -> Node {
        self.start_nodes.get(truck).copied().unwrap_or(0)
    }

    pub fn initial_total(&self) -> f64 {
        self.demand.iter().map(|e| e.volume).sum()
    }

    /// Mean off-diagonal travel time; the natural time unit of the instance.
    pub fn time_scale(&self) -> f64 {
        let n = self.coords.len();
        if n < 2 {
            return 1.0;
        }
        let total: f64 = self.time.iter().sum();
        let mean = total / (n * (n - 1)) as f64;
        if mean > 0.0 {
            mean
        } else {
            1.0
        }
    }

    /// Initial demand state for `trucks` trucks.
    pub fn initial_state(&self, trucks: usize) -> DemandState {
        let mut s = DemandState::new(self.num_nodes(), trucks);
        for e in &self.demand {
            s.add_offboard(e.component().expect("validated entry"), e.volume)
                .expect("validated entry");
        }
        s
    }

    /// Same instance with a different driving window.
    pub fn with_t_max(&self, t_max: f64) -> Result<Self, InstanceError> {
        if !(t_max > 0.0) {
            return Err(InstanceError::BadWindow(t_max));
        }
        Ok(Self { t_max, ..self.clone() })
    }

    /// Same instance with new start nodes.
    pub fn with_start_nodes(&self, start_nodes: Vec<Node>) -> Result<Self, InstanceError> {
        let time_rows = self.time_rows();
        Self::new(self.coords.clone(), time_rows, self.demand.clone(), self.t_max, start_nodes)
    }
}

/// Euclidean travel-time rows for a set of points.
pub fn euclidean_times(coords: &[[f64; 2]], time_per_unit: f64) -> Vec<Vec<f64>> {
    coords
        .iter()
        .map(|a| {
            coords
                .iter()
                .map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() * time_per_unit)
                .collect()
        })
        .collect()
}

/// Validates, merges duplicates and sorts entries into canonical order
/// (cyclic first, then by rank and itinerary).
fn canonical_demand(entries: Vec<DemandEntry>, n: usize) -> Result<Vec<DemandEntry>, InstanceError> {
    let mut merged: std::collections::BTreeMap<(bool, usize, Vec<Node>), f64> = Default::default();
    for (index, e) in entries.into_iter().enumerate() {
        if !itinerary_allowed(&e.nodes, e.cyclic, n) {
            return Err(InstanceError::BadDemand {
                index,
                reason: format!(
                    "itinerary {:?} ({}) is not allowed on {n} nodes",
                    e.nodes,
                    if e.cyclic { "cyclic" } else { "direct" }
                ),
            });
        }
        if !(e.volume.is_finite() && e.volume >= 0.0) {
            return Err(InstanceError::BadDemand { index, reason: format!("volume {} is not a nonnegative number", e.volume) });
        }
        if e.volume == 0.0 {
            continue;
        }
        *merged.entry((!e.cyclic, e.nodes.len(), e.nodes)).or_default() += e.volume;
    }
    Ok(merged
        .into_iter()
        .map(|((direct, _, nodes), volume)| DemandEntry { nodes, cyclic: !direct, volume })
        .collect())
}
