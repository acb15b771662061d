//! Box-level replay of suggested routes.

use serde::{Deserialize, Serialize};
use tvrp_core::{Instance, Node};

use crate::boxes::{BoxInventory, BoxItem, BoxLocation};
use crate::routes::SuggestedRoutes;

/// Version of the serialized fulfillment report.
pub const REPORT_VERSION: u32 = 1;

/// Slack on the capacity check for accumulated rounding.
const CAPACITY_SLACK: f64 = 1e-9;

/// Which waiting boxes a truck may load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadRule {
    /// The truck's remaining route visits the box's whole remaining path,
    /// return included, in order.
    #[default]
    Completable,
    /// The box's next node appears anywhere ahead on the route.
    NextStop,
}

/// What one truck did at one stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopEvent {
    pub time: f64,
    pub truck: usize,
    pub node: Node,
    pub unloaded: Vec<usize>,
    pub loaded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FulfillmentReport {
    pub version: u32,
    pub schedule: Vec<StopEvent>,
    pub boxes: Vec<BoxItem>,
    pub returned: usize,
    pub total: usize,
    /// Fraction of boxes that completed their full path.
    pub fulfillment: f64,
    /// Trucks whose route was cut short by the driving window.
    pub truncated_trucks: Vec<usize>,
}

/// [`full_scale_simulate_with`] under the default [`LoadRule`].
pub fn full_scale_simulate(boxes: &BoxInventory, routes: &SuggestedRoutes, instance: &Instance, t_max: f64) -> FulfillmentReport {
    full_scale_simulate_with(boxes, routes, instance, t_max, LoadRule::default())
}

/// Drives every truck along its route in physical time. At each stop the
/// truck first unloads every box whose next node is the stop, then loads
/// waiting boxes allowed by `rule`: earliest occurrence of the box's next
/// node ahead on the route first, then larger volume, then lower id, while
/// capacity 1 allows. A leg that would end after `t_max` ends that truck's
/// route.
pub fn full_scale_simulate_with(
    boxes: &BoxInventory,
    routes: &SuggestedRoutes,
    instance: &Instance,
    t_max: f64,
    rule: LoadRule,
) -> FulfillmentReport {
    let mut boxes = boxes.boxes.clone();
    let trucks = &routes.trucks;
    let mut free = vec![1.0f64; trucks.len()];
    let mut pos = vec![0usize; trucks.len()];
    let mut clock = vec![0.0f64; trucks.len()];
    let mut stopped = vec![false; trucks.len()];
    let mut truncated = Vec::new();
    let mut schedule = Vec::new();

    for m in 0..trucks.len() {
        if trucks[m].nodes.is_empty() {
            stopped[m] = true;
            continue;
        }
        schedule.push(stop(m, trucks[m].nodes[0], 0.0, &trucks[m].nodes[1..], &mut boxes, &mut free[m], rule));
    }
    loop {
        let mut next: Option<(f64, usize)> = None;
        for m in 0..trucks.len() {
            if stopped[m] {
                continue;
            }
            let nodes = &trucks[m].nodes;
            if pos[m] + 1 >= nodes.len() {
                stopped[m] = true;
                continue;
            }
            let arrive = clock[m] + instance.time(nodes[pos[m]], nodes[pos[m] + 1]);
            if arrive > t_max {
                stopped[m] = true;
                truncated.push(m);
                continue;
            }
            if next.map_or(true, |(t, _)| arrive < t) {
                next = Some((arrive, m));
            }
        }
        let Some((time, m)) = next else { break };
        pos[m] += 1;
        clock[m] = time;
        let nodes = &trucks[m].nodes;
        schedule.push(stop(m, nodes[pos[m]], time, &nodes[pos[m] + 1..], &mut boxes, &mut free[m], rule));
    }
    truncated.sort_unstable();
    let returned = boxes.iter().filter(|b| b.returned).count();
    let total = boxes.len();
    FulfillmentReport {
        version: REPORT_VERSION,
        schedule,
        returned,
        total,
        fulfillment: if total == 0 { 0.0 } else { returned as f64 / total as f64 },
        boxes,
        truncated_trucks: truncated,
    }
}

fn stop(truck: usize, node: Node, time: f64, ahead: &[Node], boxes: &mut [BoxItem], free: &mut f64, rule: LoadRule) -> StopEvent {
    let mut unloaded = Vec::new();
    for b in boxes.iter_mut() {
        if b.location == BoxLocation::Truck(truck) && b.next_node() == Some(node) {
            b.progress += 1;
            b.location = BoxLocation::Node(node);
            b.returned = b.next_node().is_none();
            *free += b.volume;
            unloaded.push(b.id);
        }
    }
    let mut candidates: Vec<(usize, f64, usize)> = boxes
        .iter()
        .filter(|b| b.location == BoxLocation::Node(node) && !b.returned)
        .filter(|b| rule == LoadRule::NextStop || completes(b, ahead))
        .filter_map(|b| {
            let next = b.next_node()?;
            ahead.iter().position(|&x| x == next).map(|k| (k, b.volume, b.id))
        })
        .collect();
    candidates.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut loaded = Vec::new();
    for (_, volume, id) in candidates {
        if volume <= *free + CAPACITY_SLACK {
            *free -= volume;
            boxes[id].location = BoxLocation::Truck(truck);
            loaded.push(id);
        }
    }
    *free = free.clamp(0.0, 1.0);
    StopEvent { time, truck, node, unloaded, loaded }
}

/// True when `ahead` contains the rest of the box's path as a subsequence.
fn completes(b: &BoxItem, ahead: &[Node]) -> bool {
    let path = b.path();
    let mut it = ahead.iter();
    path[b.progress..].iter().all(|n| it.any(|x| x == n))
}
