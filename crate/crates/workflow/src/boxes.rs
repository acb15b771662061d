//! Discrete boxes restored from continuous demand.

use serde::{Deserialize, Serialize};
use tvrp_core::{Instance, Node};

/// Default volume of one box.
pub const BOX_VOLUME: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum BoxLocation {
    Node(Node),
    Truck(usize),
}

/// One tracked box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxItem {
    pub id: usize,
    pub volume: f64,
    /// Itinerary `R_a` of rank 2 or 3.
    pub route: Vec<Node>,
    /// Cyclic boxes must come back to `route[0]`.
    pub cyclic: bool,
    pub location: BoxLocation,
    /// Nodes of the full path visited so far, counting the origin.
    pub progress: usize,
    pub returned: bool,
}

impl BoxItem {
    pub fn new(id: usize, volume: f64, route: Vec<Node>, cyclic: bool) -> Self {
        let location = BoxLocation::Node(route[0]);
        Self { id, volume, route, cyclic, location, progress: 1, returned: false }
    }

    /// `R_a` followed by the return to `R_a^1` for cyclic boxes.
    pub fn path(&self) -> Vec<Node> {
        let mut p = self.route.clone();
        if self.cyclic {
            p.push(self.route[0]);
        }
        p
    }

    /// Next node the box must reach, or `None` once complete.
    pub fn next_node(&self) -> Option<Node> {
        let len = self.route.len() + usize::from(self.cyclic);
        if self.progress >= len {
            return None;
        }
        Some(if self.progress == self.route.len() { self.route[0] } else { self.route[self.progress] })
    }

    /// Nodes visited so far, a prefix of [`BoxItem::path`].
    pub fn visited(&self) -> Vec<Node> {
        self.path()[..self.progress].to_vec()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxInventory {
    pub boxes: Vec<BoxItem>,
}

impl BoxInventory {
    /// Each demand entry becomes `ceil(volume / box_volume)` boxes of equal
    /// volume, all waiting at the entry's origin.
    pub fn from_instance(instance: &Instance, box_volume: f64) -> Self {
        let mut boxes = Vec::new();
        for e in instance.demand() {
            if e.volume <= 0.0 {
                continue;
            }
            let count = (e.volume / box_volume - 1e-9).ceil().max(1.0) as usize;
            let each = e.volume / count as f64;
            for _ in 0..count {
                boxes.push(BoxItem::new(boxes.len(), each, e.nodes.clone(), e.cyclic));
            }
        }
        Self { boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn total_volume(&self) -> f64 {
        self.boxes.iter().map(|b| b.volume).sum()
    }
}
