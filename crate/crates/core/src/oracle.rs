//! Exhaustive route enumerator for tiny single-truck instances with direct
//! rank-2 demand.
//!
//! The simulator here is written independently of [`crate::demand`] and
//! [`crate::env`] so the two can be checked against each other. The driving
//! window is ignored.

use serde::Serialize;

use crate::demand::{Node, VOLUME_EPS};
use crate::instance::Instance;

/// Largest instance the oracle accepts.
pub const MAX_NODES: usize = 5;
/// Longest route (in legs) the oracle searches.
pub const MAX_LEGS: usize = 12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("oracle handles at most {MAX_NODES} nodes, instance has {0}")]
    TooManyNodes(usize),
    #[error("oracle searches at most {MAX_LEGS} legs, asked for {0}")]
    TooLong(usize),
    #[error("oracle needs direct rank-2 demand only; entry {0} is not")]
    UnsupportedDemand(usize),
}

/// Outcome of driving one route.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub time: f64,
    /// All demand delivered by the end of the route.
    pub satisfies: bool,
    pub delivered: f64,
}

/// Best demand-satisfying route found.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Optimum {
    /// Node sequence starting at the truck's start node.
    pub route: Vec<Node>,
    pub time: f64,
    /// Routes fully simulated during the search.
    pub explored: usize,
}

/// A single truck of capacity 1 serving direct pair demand.
#[derive(Debug, Clone)]
pub struct Oracle {
    n: usize,
    time: Vec<Vec<f64>>,
    start: Node,
    /// `waiting[i][j]`: volume at `i` bound for `j`.
    waiting: Vec<Vec<f64>>,
    total: f64,
}

#[derive(Debug, Clone)]
struct Truck {
    at: Node,
    clock: f64,
    waiting: Vec<Vec<f64>>,
    /// Carried volume by destination.
    hold: Vec<f64>,
    delivered: f64,
}

impl Oracle {
    pub fn new(instance: &Instance) -> Result<Self, OracleError> {
        let n = instance.num_nodes();
        if n > MAX_NODES {
            return Err(OracleError::TooManyNodes(n));
        }
        let mut waiting = vec![vec![0.0; n]; n];
        for (idx, e) in instance.demand().iter().enumerate() {
            if e.cyclic || e.nodes.len() != 2 {
                return Err(OracleError::UnsupportedDemand(idx));
            }
            waiting[e.nodes[0]][e.nodes[1]] += e.volume;
        }
        Ok(Self {
            n,
            time: instance.time_rows(),
            start: instance.start_node(0),
            waiting,
            total: instance.initial_total(),
        })
    }

    fn start_truck(&self) -> Truck {
        let mut t = Truck {
            at: self.start,
            clock: 0.0,
            waiting: self.waiting.clone(),
            hold: vec![0.0; self.n],
            delivered: 0.0,
        };
        self.load(&mut t);
        t
    }

    fn load(&self, t: &mut Truck) {
        let mut room = 1.0 - t.hold.iter().sum::<f64>();
        for j in 0..self.n {
            if room <= 0.0 {
                break;
            }
            let v = t.waiting[t.at][j];
            if v <= 0.0 {
                continue;
            }
            let take = if v - room <= VOLUME_EPS { v } else { room };
            t.waiting[t.at][j] = if take == v { 0.0 } else { v - room };
            t.hold[j] += take;
            room -= take;
        }
    }

    fn drive(&self, t: &mut Truck, to: Node) {
        t.clock += self.time[t.at][to];
        t.at = to;
        t.delivered += t.hold[to];
        t.hold[to] = 0.0;
        self.load(t);
    }

    fn done(&self, t: &Truck) -> bool {
        let left: f64 = t.waiting.iter().flatten().sum::<f64>() + t.hold.iter().sum::<f64>();
        left <= VOLUME_EPS
    }

    /// Drives `route` (which starts at the start node).
    pub fn simulate(&self, route: &[Node]) -> Verdict {
        let mut t = self.start_truck();
        for &v in route.iter().skip(1) {
            self.drive(&mut t, v);
        }
        Verdict { time: t.clock, satisfies: self.done(&t), delivered: t.delivered }
    }

    pub fn total_demand(&self) -> f64 {
        self.total
    }

    /// Every route from the start node with consecutive-distinct stops and at
    /// most `max_legs` legs. A route is not extended once it satisfies all
    /// demand. Routes are listed in depth-first lexicographic order.
    pub fn enumerate(&self, max_legs: usize) -> Result<Vec<(Vec<Node>, Verdict)>, OracleError> {
        if max_legs > MAX_LEGS {
            return Err(OracleError::TooLong(max_legs));
        }
        let mut out = Vec::new();
        let mut route = vec![self.start];
        self.walk(&mut route, self.start_truck(), max_legs, &mut out);
        Ok(out)
    }

    fn walk(&self, route: &mut Vec<Node>, t: Truck, left: usize, out: &mut Vec<(Vec<Node>, Verdict)>) {
        let satisfies = self.done(&t);
        out.push((route.clone(), Verdict { time: t.clock, satisfies, delivered: t.delivered }));
        if satisfies || left == 0 {
            return;
        }
        for v in 0..self.n {
            if v == t.at {
                continue;
            }
            let mut next = t.clone();
            self.drive(&mut next, v);
            route.push(v);
            self.walk(route, next, left - 1, out);
            route.pop();
        }
    }

    /// Fastest demand-satisfying route with at most `max_legs` legs, by
    /// branch and bound. Ties keep the first route in lexicographic order.
    pub fn optimum(&self, max_legs: usize) -> Result<Option<Optimum>, OracleError> {
        if max_legs > MAX_LEGS {
            return Err(OracleError::TooLong(max_legs));
        }
        let mut best: Option<Optimum> = None;
        let mut explored = 0;
        let mut route = vec![self.start];
        self.search(&mut route, self.start_truck(), max_legs, &mut best, &mut explored);
        Ok(best.map(|b| Optimum { explored, ..b }))
    }

    fn search(&self, route: &mut Vec<Node>, t: Truck, left: usize, best: &mut Option<Optimum>, explored: &mut usize) {
        *explored += 1;
        if let Some(b) = best {
            if t.clock >= b.time {
                return;
            }
        }
        if self.done(&t) {
            *best = Some(Optimum { route: route.clone(), time: t.clock, explored: 0 });
            return;
        }
        if left == 0 {
            return;
        }
        for v in 0..self.n {
            if v == t.at {
                continue;
            }
            let mut next = t.clone();
            self.drive(&mut next, v);
            route.push(v);
            self.search(route, next, left - 1, best, explored);
            route.pop();
        }
    }
}
