//! Event-driven multi-truck episode engine.
//!
//! At every decision point exactly one truck is *active*: the non-retired
//! truck with the smallest arrival clock (lowest index on ties). The active
//! truck is given a destination, its clock advances by the leg time, and the
//! engine moves on to the next arrival, where the arriving truck drops off
//! and then picks up before it becomes active.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{DemandState, Dropoff, Node, Pickup, Truck, VOLUME_EPS};
use crate::instance::Instance;

/// Engine settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub num_trucks: usize,
    /// Hard cap on decisions per episode; reaching it ends the episode.
    pub max_steps: usize,
    /// Keep every arrival with its transfers (used for provenance replay).
    pub record_events: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { num_trucks: 1, max_steps: 1000, record_events: false }
    }
}

impl EnvConfig {
    pub fn with_trucks(num_trucks: usize) -> Self {
        Self { num_trucks, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruckState {
    /// Node of the last arrival.
    pub node: Node,
    /// Destination while driving.
    pub heading: Option<Node>,
    /// Physical time of the next event for this truck.
    pub clock: f64,
    /// Physical time of the last completed arrival.
    pub last_arrival: f64,
    pub capacity_free: f64,
    pub retired: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetState {
    pub trucks: Vec<TruckState>,
    pub active: Option<Truck>,
}

impl FleetState {
    /// Non-retired truck with the earliest clock, lowest index on ties.
    pub fn next_event(&self) -> Option<Truck> {
        let mut best: Option<Truck> = None;
        for (m, t) in self.trucks.iter().enumerate() {
            if t.retired {
                continue;
            }
            match best {
                Some(b) if self.trucks[b].clock <= t.clock => {}
                _ => best = Some(m),
            }
        }
        best
    }
}

/// A processed arrival together with the demand transitions it caused.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub truck: Truck,
    pub node: Node,
    pub time: f64,
    pub dropoff: Dropoff,
    pub pickup: Pickup,
}

/// What happened between one decision and the next.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInfo {
    /// Volume satisfied by the arrivals processed in this step.
    pub satisfied: f64,
    pub arrivals: usize,
    pub retired: Vec<Truck>,
    pub done: bool,
}

/// Snapshot handed to a policy at a decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub active: Truck,
    pub now: f64,
    pub delta_out: Vec<f64>,
    pub delta_in: Vec<f64>,
    /// `epsilon[m][i]`, one row per truck.
    pub epsilon: Vec<Vec<f64>>,
    /// Current node for the active truck, destination for the others.
    pub positions: Vec<Node>,
    /// Time until each truck's next arrival; 0 for the active truck.
    pub remaining: Vec<f64>,
    pub capacities: Vec<f64>,
    pub mask: Vec<bool>,
    /// Rank-2 summary `sum_k Dtot[ijk] + Dtot[ij]`, row-major.
    pub pair_demand: Vec<f64>,
    /// Rank-2 off-board total, row-major.
    pub rank2_demand: Vec<f64>,
    /// Rank-3 off-board total, row-major.
    pub triple_demand: Vec<f64>,
}

/// Route of one episode plus its terminal metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub start_nodes: Vec<Node>,
    /// Chosen node per decision (`xi_t`).
    pub nodes: Vec<Node>,
    /// Active truck per decision (`A_t`).
    pub trucks: Vec<Truck>,
    /// Physical departure time per decision.
    pub departs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Demand coverage.
    pub eta: f64,
    /// Finish time of the last truck.
    pub finish_time: f64,
    pub objective: f64,
    /// Ended by the step cap rather than by demand or the window.
    pub truncated: bool,
}

/// One leg of a truck route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub from: Node,
    pub to: Node,
    pub depart: f64,
    pub arrive: f64,
}

impl EpisodeRecord {
    /// `log pi(route) = sum_t log pi_t`.
    pub fn route_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Per-truck legs, in the order each truck drove them.
    pub fn truck_legs(&self, instance: &Instance) -> Vec<Vec<Leg>> {
        let trucks = self.start_nodes.len();
        let mut at: Vec<Node> = self.start_nodes.clone();
        let mut legs = vec![Vec::new(); trucks];
        for ((&node, &m), &depart) in self.nodes.iter().zip(&self.trucks).zip(&self.departs) {
            let from = at[m];
            legs[m].push(Leg { from, to: node, depart, arrive: depart + instance.time(from, node) });
            at[m] = node;
        }
        legs
    }
}

/// `F = -B * eta + T / T_max`.
pub fn objective(eta: f64, finish_time: f64, t_max: f64, b_coverage: f64) -> f64 {
    -b_coverage * eta + finish_time / t_max
}

/// Sum of consecutive leg times along `route`.
pub fn route_time(route: &[Node], instance: &Instance) -> f64 {
    route.windows(2).map(|w| instance.time(w[0], w[1])).sum()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("episode needs at least one truck")]
    NoTrucks,
    #[error("episode already terminated")]
    Terminated,
    #[error("node {node} is out of range for {n} nodes")]
    OutOfRange { node: Node, n: usize },
    #[error("node {node} is masked for active truck {truck}")]
    Masked { node: Node, truck: Truck },
}

/// Scalar episode engine.
#[derive(Debug, Clone)]
pub struct Env {
    instance: Arc<Instance>,
    config: EnvConfig,
    demand: DemandState,
    fleet: FleetState,
    initial_total: f64,
    nodes: Vec<Node>,
    trucks: Vec<Truck>,
    departs: Vec<f64>,
    log_probs: Vec<f64>,
    event_times: Vec<f64>,
    events: Vec<Arrival>,
    done: bool,
    truncated: bool,
}

impl Env {
    /// Starts an episode: every truck at its start node with clock 0 and an
    /// empty hold. Each truck loads at its start node (in truck order) before
    /// the first decision.
    pub fn reset(instance: Arc<Instance>, config: EnvConfig) -> Result<Self, EnvError> {
        if config.num_trucks == 0 {
            return Err(EnvError::NoTrucks);
        }
        let demand = instance.initial_state(config.num_trucks);
        let trucks = (0..config.num_trucks)
            .map(|m| TruckState {
                node: instance.start_node(m),
                heading: None,
                clock: 0.0,
                last_arrival: 0.0,
                capacity_free: 1.0,
                retired: false,
            })
            .collect();
        let mut env = Self {
            initial_total: instance.initial_total(),
            instance,
            config,
            demand,
            fleet: FleetState { trucks, active: None },
            nodes: Vec::new(),
            trucks: Vec::new(),
            departs: Vec::new(),
            log_probs: Vec::new(),
            event_times: Vec::new(),
            events: Vec::new(),
            done: false,
            truncated: false,
        };
        for m in 0..config.num_trucks {
            let node = env.fleet.trucks[m].node;
            env.arrive(m, node, 0.0);
        }
        let mut info = StepInfo::default();
        env.advance(&mut info);
        Ok(env)
    }

    pub fn instance(&self) -> &Instance {
        &self.instance
    }

    pub fn shared_instance(&self) -> &Arc<Instance> {
        &self.instance
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn demand(&self) -> &DemandState {
        &self.demand
    }

    pub fn fleet(&self) -> &FleetState {
        &self.fleet
    }

    pub fn active(&self) -> Option<Truck> {
        self.fleet.active
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps(&self) -> usize {
        self.nodes.len()
    }

    pub fn initial_total(&self) -> f64 {
        self.initial_total
    }

    /// Physical time of the current decision.
    pub fn now(&self) -> f64 {
        self.fleet.active.map_or_else(|| self.finish_time(), |m| self.fleet.trucks[m].clock)
    }

    /// Times of all processed arrivals, in processing order.
    pub fn event_times(&self) -> &[f64] {
        &self.event_times
    }

    /// Recorded arrivals; empty unless `record_events` is set.
    pub fn events(&self) -> &[Arrival] {
        &self.events
    }

    pub fn coverage(&self) -> f64 {
        self.demand.coverage(self.initial_total)
    }

    /// Latest completed arrival over all trucks.
    pub fn finish_time(&self) -> f64 {
        self.fleet.trucks.iter().map(|t| t.last_arrival).fold(0.0, f64::max)
    }

    /// Allowed next nodes for the active truck (all false once done).
    pub fn mask(&self) -> Vec<bool> {
        match self.fleet.active {
            Some(m) => self.mask_for(m),
            None => vec![false; self.instance.num_nodes()],
        }
    }

    /// A node is allowed when it is not the truck's current node and either
    /// has off-board demand waiting or is the next stop of something on
    /// board. If nothing qualifies, every other node is allowed. Nodes the
    /// truck cannot reach inside the driving window are then removed.
    pub fn mask_for(&self, truck: Truck) -> Vec<bool> {
        let n = self.instance.num_nodes();
        let t = &self.fleet.trucks[truck];
        if n == 1 {
            return vec![true];
        }
        let views = self.demand.myopic_views();
        let eps = &views.epsilon[truck];
        let mut mask: Vec<bool> = (0..n)
            .map(|i| i != t.node && (views.delta_out[i] > 0.0 || eps[i] > 0.0))
            .collect();
        if !mask.iter().any(|&a| a) {
            mask = (0..n).map(|i| i != t.node).collect();
        }
        if self.instance.has_window() {
            let t_max = self.instance.t_max();
            for (i, allowed) in mask.iter_mut().enumerate() {
                *allowed &= t.clock + self.instance.time(t.node, i) <= t_max;
            }
        }
        mask
    }

    pub fn observe(&self) -> Observation {
        let active = self.fleet.active.expect("observe called on a finished episode");
        let now = self.fleet.trucks[active].clock;
        let views = self.demand.myopic_views();
        let positions = self
            .fleet
            .trucks
            .iter()
            .enumerate()
            .map(|(m, t)| if m == active { t.node } else { t.heading.unwrap_or(t.node) })
            .collect();
        let remaining = self
            .fleet
            .trucks
            .iter()
            .enumerate()
            .map(|(m, t)| {
                if m == active || t.retired || t.heading.is_none() {
                    0.0
                } else {
                    (t.clock - now).max(0.0)
                }
            })
            .collect();
        Observation {
            active,
            now,
            delta_out: views.delta_out,
            delta_in: views.delta_in,
            epsilon: views.epsilon,
            positions,
            remaining,
            capacities: self.fleet.trucks.iter().map(|t| t.capacity_free).collect(),
            mask: self.mask_for(active),
            pair_demand: self.demand.pair_demand(),
            rank2_demand: self.demand.rank2_demand(),
            triple_demand: self.demand.triple_demand(),
        }
    }

    /// Sends the active truck to `node` (a scripted action, log-prob 0).
    pub fn step(&mut self, node: Node) -> Result<StepInfo, EnvError> {
        self.step_with_log_prob(node, 0.0)
    }

    /// Sends the active truck to `node`, recording the policy log-prob.
    pub fn step_with_log_prob(&mut self, node: Node, log_prob: f64) -> Result<StepInfo, EnvError> {
        let m = self.check_action(node)?;
        if !self.mask_for(m)[node] {
            return Err(EnvError::Masked { node, truck: m });
        }
        Ok(self.apply(m, node, log_prob))
    }

    /// Like [`Env::step`] but skips the mask check. Used to replay arbitrary
    /// routes against an external enumerator.
    pub fn step_unchecked(&mut self, node: Node) -> Result<StepInfo, EnvError> {
        let m = self.check_action(node)?;
        Ok(self.apply(m, node, 0.0))
    }

    fn check_action(&self, node: Node) -> Result<Truck, EnvError> {
        let m = match (self.done, self.fleet.active) {
            (false, Some(m)) => m,
            _ => return Err(EnvError::Terminated),
        };
        let n = self.instance.num_nodes();
        if node >= n {
            return Err(EnvError::OutOfRange { node, n });
        }
        Ok(m)
    }

    fn apply(&mut self, m: Truck, node: Node, log_prob: f64) -> StepInfo {
        let t = &mut self.fleet.trucks[m];
        self.nodes.push(node);
        self.trucks.push(m);
        self.departs.push(t.clock);
        self.log_probs.push(log_prob);
        t.clock += self.instance.time(t.node, node);
        t.heading = Some(node);
        let mut info = StepInfo::default();
        self.advance(&mut info);
        info
    }

    fn arrive(&mut self, m: Truck, node: Node, time: f64) -> f64 {
        let dropoff = self.demand.dropoff(m, node);
        let t = &mut self.fleet.trucks[m];
        t.node = node;
        t.heading = None;
        t.last_arrival = time;
        t.capacity_free = (t.capacity_free + dropoff.dropped).clamp(0.0, 1.0);
        let pickup = self.demand.pickup(m, node, t.capacity_free);
        t.capacity_free = (t.capacity_free - pickup.loaded).clamp(0.0, 1.0);
        self.event_times.push(time);
        let satisfied = dropoff.satisfied;
        if self.config.record_events {
            self.events.push(Arrival { truck: m, node, time, dropoff, pickup });
        }
        satisfied
    }

    fn advance(&mut self, info: &mut StepInfo) {
        loop {
            self.fleet.active = None;
            if self.demand.total_remaining() <= VOLUME_EPS {
                break;
            }
            if self.nodes.len() >= self.config.max_steps {
                self.truncated = true;
                break;
            }
            let Some(m) = self.fleet.next_event() else { break };
            if let Some(dest) = self.fleet.trucks[m].heading {
                let time = self.fleet.trucks[m].clock;
                info.satisfied += self.arrive(m, dest, time);
                info.arrivals += 1;
                if self.demand.total_remaining() <= VOLUME_EPS {
                    break;
                }
            }
            let t = &self.fleet.trucks[m];
            if t.clock >= self.instance.t_max() || !self.mask_for(m).iter().any(|&a| a) {
                self.fleet.trucks[m].retired = true;
                info.retired.push(m);
                continue;
            }
            self.fleet.active = Some(m);
            info.done = false;
            return;
        }
        self.done = true;
        info.done = true;
    }

    /// Route and terminal metrics so far.
    pub fn record(&self, b_coverage: f64) -> EpisodeRecord {
        let eta = self.coverage();
        let finish_time = self.finish_time();
        EpisodeRecord {
            start_nodes: (0..self.config.num_trucks).map(|m| self.instance.start_node(m)).collect(),
            nodes: self.nodes.clone(),
            trucks: self.trucks.clone(),
            departs: self.departs.clone(),
            log_probs: self.log_probs.clone(),
            eta,
            finish_time,
            objective: objective(eta, finish_time, self.instance.t_max(), b_coverage),
            truncated: self.truncated,
        }
    }
}

/// `B` independent episodes stepped in lockstep.
///
/// Finished entries ignore their action and repeat their last route entry in
/// [`BatchEnv::route_tensor`].
#[derive(Debug, Clone)]
pub struct BatchEnv {
    envs: Vec<Env>,
}

impl BatchEnv {
    pub fn reset(instances: &[Arc<Instance>], config: EnvConfig) -> Result<Self, EnvError> {
        let envs = instances
            .par_iter()
            .map(|inst| Env::reset(inst.clone(), config))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { envs })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[Env] {
        &self.envs
    }

    pub fn all_done(&self) -> bool {
        self.envs.iter().all(Env::is_done)
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.envs.par_iter().map(Env::mask).collect()
    }

    pub fn observations(&self) -> Vec<Option<Observation>> {
        self.envs.par_iter().map(|e| (!e.is_done()).then(|| e.observe())).collect()
    }

    /// Steps every live entry; `actions[b]` is ignored for finished entries.
    pub fn step(&mut self, actions: &[Node]) -> Result<Vec<StepInfo>, EnvError> {
        assert_eq!(actions.len(), self.envs.len(), "one action per batch entry");
        self.envs
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(env, &a)| {
                if env.is_done() {
                    Ok(StepInfo { done: true, ..StepInfo::default() })
                } else {
                    env.step(a)
                }
            })
            .collect()
    }

    pub fn records(&self, b_coverage: f64) -> Vec<EpisodeRecord> {
        self.envs.iter().map(|e| e.record(b_coverage)).collect()
    }

    /// `(xi[b][t], A[b][t])` padded to a common length by repeating each
    /// entry's final decision.
    pub fn route_tensor(&self) -> (Vec<Vec<Node>>, Vec<Vec<Truck>>) {
        let len = self.envs.iter().map(Env::steps).max().unwrap_or(0);
        let pad = |v: &[usize], fill: usize| {
            let mut out = v.to_vec();
            let last = out.last().copied().unwrap_or(fill);
            out.resize(len, last);
            out
        };
        self.envs
            .iter()
            .map(|e| {
                let start = e.instance.start_node(0);
                (pad(&e.nodes, start), pad(&e.trucks, 0))
            })
            .unzip()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::DemandEntry;

    fn instance(coords: Vec<[f64; 2]>, demand: Vec<DemandEntry>, t_max: f64) -> Arc<Instance> {
        Arc::new(Instance::euclidean(coords, 1.0, demand, t_max, vec![]).unwrap())
    }

    #[test]
    fn reset_state() {
        let inst = instance(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![DemandEntry::cyclic(&[1, 2], 0.5)], 10.0);
        let env = Env::reset(inst, EnvConfig::with_trucks(3)).unwrap();
        assert_eq!(env.active(), Some(0));
        assert!(env.fleet().trucks.iter().all(|t| t.capacity_free == 1.0 && t.clock == 0.0));
        assert_eq!(env.coverage(), 0.0);
    }

    #[test]
    fn single_truck_leg_arithmetic() {
        let rows = vec![vec![0.0, 3.0], vec![3.0, 0.0]];
        let inst =
            Arc::new(Instance::new(vec![[0.0, 0.0], [3.0, 0.0]], rows, vec![DemandEntry::cyclic(&[1, 0], 0.5)], 100.0, vec![]).unwrap());
        let mut env = Env::reset(inst, EnvConfig::with_trucks(1)).unwrap();
        env.step(1).unwrap();
        assert_eq!(env.now(), 3.0);
        assert_eq!(env.fleet().trucks[0].node, 1);
    }

    #[test]
    fn next_active_is_earliest_clock() {
        // truck 0 drives 4, truck 1 drives 2
        let coords = vec![[0.0, 0.0], [4.0, 0.0], [0.0, 2.0]];
        let inst = instance(coords, vec![DemandEntry::cyclic(&[1, 2], 0.2), DemandEntry::cyclic(&[2, 1], 0.2)], 100.0);
        let mut env = Env::reset(inst, EnvConfig::with_trucks(2)).unwrap();
        env.step(1).unwrap();
        assert_eq!(env.active(), Some(1));
        env.step(2).unwrap();
        assert_eq!(env.active(), Some(1));
        assert_eq!(env.now(), 2.0);
        assert_eq!(env.fleet().trucks[0].clock, 4.0);
    }

    #[test]
    fn mask_fallback_when_only_current_node_has_demand() {
        let inst = instance(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![DemandEntry::direct(&[2, 1], 2.0)], f64::INFINITY);
        // truck starts at node 2 and can only take half of the demand
        let inst = Arc::new(inst.with_start_nodes(vec![2]).unwrap());
        let mut env = Env::reset(inst, EnvConfig::with_trucks(1)).unwrap();
        assert_eq!(env.mask(), vec![false, true, false]);
        env.step(1).unwrap();
        // back at 1 with nothing on board: only demand left is at node 2
        assert_eq!(env.mask(), vec![false, false, true]);
        env.step(2).unwrap();
        // at node 2 again, loaded; next stop 1
        assert_eq!(env.mask(), vec![false, true, false]);
    }

    #[test]
    fn mask_rule_evaluation() {
        // delta_out = (0, 1, 0), eps[active] = (1, 0, 0), truck at node 1
        let inst = instance(
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
            vec![DemandEntry::direct(&[2, 0], 1.0), DemandEntry::direct(&[1, 2], 1.0)],
            f64::INFINITY,
        );
        let inst = Arc::new(inst.with_start_nodes(vec![2]).unwrap());
        let mut env = Env::reset(inst, EnvConfig::with_trucks(1)).unwrap();
        // loaded direct2[2,0] -> eps = (1,0,0); step to 1 without dropping
        env.step_unchecked(1).unwrap();
        // arrival at 1 loads nothing (full), delta_out = (0,1,0)
        let v = env.demand().myopic_views();
        assert_eq!(v.delta_out, vec![0.0, 1.0, 0.0]);
        assert_eq!(v.epsilon[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(env.mask(), vec![true, false, false]);
    }

    #[test]
    fn masked_action_is_rejected() {
        let inst = instance(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![DemandEntry::cyclic(&[1, 2], 0.5)], f64::INFINITY);
        let mut env = Env::reset(inst, EnvConfig::with_trucks(1)).unwrap();
        assert_eq!(env.step(0), Err(EnvError::Masked { node: 0, truck: 0 }));
        assert_eq!(env.step(2), Err(EnvError::Masked { node: 2, truck: 0 }));
        assert!(env.step(1).is_ok());
    }

    #[test]
    fn objective_substitution() {
        assert_eq!(objective(1.0, 16.0, 16.0, 10.0), -9.0);
        assert_eq!(objective(0.0, 0.0, 16.0, 10.0), 0.0);
        assert_eq!(objective(0.5, 8.0, 16.0, 10.0), -4.5);
    }

    #[test]
    fn route_time_sums_legs() {
        let rows = vec![vec![0.0, 2.0], vec![3.0, 0.0]];
        let inst = Instance::new(vec![[0.0, 0.0], [1.0, 0.0]], rows, vec![DemandEntry::cyclic(&[0, 1], 0.1)], 1.0, vec![]).unwrap();
        assert_eq!(route_time(&[0, 0], &inst), 0.0);
        assert_eq!(route_time(&[0, 1, 0], &inst), 5.0);
    }

    #[test]
    fn window_retires_trucks() {
        let inst = instance(vec![[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]], vec![DemandEntry::cyclic(&[1, 2], 0.5)], 3.0);
        let mut env = Env::reset(inst, EnvConfig::with_trucks(1)).unwrap();
        env.step(1).unwrap();
        // node 2 is 4 away, beyond the window: truck retires and the episode ends
        assert!(env.is_done());
        let rec = env.record(10.0);
        assert_eq!(rec.eta, 0.0);
        assert_eq!(rec.finish_time, 1.0);
    }
}
