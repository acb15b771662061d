//! Suggested truck routes.

use serde::{Deserialize, Serialize};
use tvrp_core::{EpisodeRecord, Instance, Node};

/// Version of the serialized route document.
pub const ROUTES_VERSION: u32 = 1;

/// One truck's itinerary: `nodes[0]` is the start and leg `k` leaves
/// `nodes[k]` at `departs[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruckRoute {
    pub nodes: Vec<Node>,
    pub departs: Vec<f64>,
}

impl TruckRoute {
    /// Arrival time at the final node when driving without waits.
    pub fn end_time(&self, instance: &Instance) -> f64 {
        match (self.departs.last(), self.nodes.len()) {
            (Some(&d), len) if len >= 2 => d + instance.time(self.nodes[len - 2], self.nodes[len - 1]),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestedRoutes {
    pub version: u32,
    pub trucks: Vec<TruckRoute>,
}

impl Default for SuggestedRoutes {
    fn default() -> Self {
        Self { version: ROUTES_VERSION, trucks: Vec::new() }
    }
}

impl SuggestedRoutes {
    /// Per-truck routes of an episode with local node ids mapped through
    /// `mapping`.
    pub fn from_record(record: &EpisodeRecord, mapping: &[Node]) -> Vec<TruckRoute> {
        let mut out: Vec<TruckRoute> =
            record.start_nodes.iter().map(|&s| TruckRoute { nodes: vec![mapping[s]], departs: Vec::new() }).collect();
        for ((&node, &truck), &depart) in record.nodes.iter().zip(&record.trucks).zip(&record.departs) {
            out[truck].nodes.push(mapping[node]);
            out[truck].departs.push(depart);
        }
        out
    }

    /// Latest arrival over all trucks.
    pub fn max_route_time(&self, instance: &Instance) -> f64 {
        self.trucks.iter().map(|t| t.end_time(instance)).fold(0.0, f64::max)
    }
}
