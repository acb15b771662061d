//! Demand tensors and the arrival transition rules.
//!
//! Off-board demand is a single shared pool split into *direct* and *cyclic*
//! parts of rank 2 and 3. On-board demand is tracked per truck at ranks 1-3.
//! A truck arriving at a node first drops off everything whose next stop is
//! that node, then loads greedily from the components whose first index is
//! the node.
//!
//! | picked up from         | becomes on-board          |
//! |------------------------|---------------------------|
//! | `direct2[i, j]`        | `onboard1[m][j]`          |
//! | `direct3[i, j, k]`     | `onboard2[m][j, k]`       |
//! | `cyclic2[i, j]`        | `onboard2[m][j, i]`       |
//! | `cyclic3[i, j, k]`     | `onboard3[m][j, k, i]`    |
//!
//! Dropping off `onboard1[m][i]` at `i` is final satisfaction; higher ranks
//! turn back into direct off-board demand at the drop node.

use serde::{Deserialize, Serialize};

/// Volumes at or below this are treated as zero: a split that would leave
/// a smaller remainder loads the whole component instead.
pub const VOLUME_EPS: f64 = 1e-12;

/// Node index, `0..n`.
pub type Node = usize;
/// Truck index, `0..num_trucks`.
pub type Truck = usize;

/// One scalar slot of the demand state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    Direct2(Node, Node),
    Direct3(Node, Node, Node),
    Cyclic2(Node, Node),
    Cyclic3(Node, Node, Node),
    Onboard1(Truck, Node),
    Onboard2(Truck, Node, Node),
    Onboard3(Truck, Node, Node, Node),
    Satisfied,
}

impl Component {
    /// True when the index pattern can never carry volume.
    pub fn is_degenerate(&self) -> bool {
        match *self {
            Component::Direct2(i, j) | Component::Cyclic2(i, j) => i == j,
            Component::Direct3(i, j, k) => i == j || j == k,
            Component::Cyclic3(i, j, k) => i == j || j == k || k == i,
            Component::Onboard1(..) | Component::Satisfied => false,
            Component::Onboard2(_, i, j) => i == j,
            Component::Onboard3(_, i, j, k) => i == j || j == k,
        }
    }
}

/// Volume moved from one component to another by a transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub from: Component,
    pub to: Component,
    pub volume: f64,
}

/// Result of [`DemandState::dropoff`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dropoff {
    /// Volume that reached its final destination.
    pub satisfied: f64,
    /// Total volume unloaded (frees this much capacity).
    pub dropped: f64,
    pub transfers: Vec<Transfer>,
}

/// Result of [`DemandState::pickup`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pickup {
    pub loaded: f64,
    pub transfers: Vec<Transfer>,
}

/// Per-node scalar summaries of the tensor demand.
#[derive(Debug, Clone, PartialEq)]
pub struct MyopicViews {
    /// Off-board volume waiting at node `i`.
    pub delta_out: Vec<f64>,
    /// Off-board volume whose next stop is node `i`.
    pub delta_in: Vec<f64>,
    /// `epsilon[m][i]`: volume on truck `m` whose next stop is node `i`.
    pub epsilon: Vec<Vec<f64>>,
}

/// Dense demand tensors for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandState {
    n: usize,
    trucks: usize,
    direct2: Vec<f64>,
    direct3: Vec<f64>,
    cyclic2: Vec<f64>,
    cyclic3: Vec<f64>,
    onboard1: Vec<f64>,
    onboard2: Vec<f64>,
    onboard3: Vec<f64>,
    satisfied: f64,
}

impl DemandState {
    /// All-zero state for `n` nodes and `trucks` trucks.
    pub fn new(n: usize, trucks: usize) -> Self {
        let n2 = n * n;
        let n3 = n2 * n;
        Self {
            n,
            trucks,
            direct2: vec![0.0; n2],
            direct3: vec![0.0; n3],
            cyclic2: vec![0.0; n2],
            cyclic3: vec![0.0; n3],
            onboard1: vec![0.0; trucks * n],
            onboard2: vec![0.0; trucks * n2],
            onboard3: vec![0.0; trucks * n3],
            satisfied: 0.0,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_trucks(&self) -> usize {
        self.trucks
    }

    #[inline]
    fn i2(&self, i: Node, j: Node) -> usize {
        i * self.n + j
    }

    #[inline]
    fn i3(&self, i: Node, j: Node, k: Node) -> usize {
        (i * self.n + j) * self.n + k
    }

    #[inline]
    fn slot(&self, c: Component) -> Option<(Store, usize)> {
        let n = self.n;
        Some(match c {
            Component::Direct2(i, j) => (Store::Direct2, self.i2(i, j)),
            Component::Direct3(i, j, k) => (Store::Direct3, self.i3(i, j, k)),
            Component::Cyclic2(i, j) => (Store::Cyclic2, self.i2(i, j)),
            Component::Cyclic3(i, j, k) => (Store::Cyclic3, self.i3(i, j, k)),
            Component::Onboard1(m, i) => (Store::Onboard1, m * n + i),
            Component::Onboard2(m, i, j) => (Store::Onboard2, m * n * n + self.i2(i, j)),
            Component::Onboard3(m, i, j, k) => (Store::Onboard3, m * n * n * n + self.i3(i, j, k)),
            Component::Satisfied => return None,
        })
    }

    fn store(&self, s: Store) -> &[f64] {
        match s {
            Store::Direct2 => &self.direct2,
            Store::Direct3 => &self.direct3,
            Store::Cyclic2 => &self.cyclic2,
            Store::Cyclic3 => &self.cyclic3,
            Store::Onboard1 => &self.onboard1,
            Store::Onboard2 => &self.onboard2,
            Store::Onboard3 => &self.onboard3,
        }
    }

    fn store_mut(&mut self, s: Store) -> &mut [f64] {
        match s {
            Store::Direct2 => &mut self.direct2,
            Store::Direct3 => &mut self.direct3,
            Store::Cyclic2 => &mut self.cyclic2,
            Store::Cyclic3 => &mut self.cyclic3,
            Store::Onboard1 => &mut self.onboard1,
            Store::Onboard2 => &mut self.onboard2,
            Store::Onboard3 => &mut self.onboard3,
        }
    }

    /// Current volume of a component.
    pub fn get(&self, c: Component) -> f64 {
        match self.slot(c) {
            Some((s, idx)) => self.store(s)[idx],
            None => self.satisfied,
        }
    }

    /// Adds initial off-board volume. Degenerate or on-board components are
    /// rejected: only `Direct*`/`Cyclic*` may seed an episode.
    pub fn add_offboard(&mut self, c: Component, volume: f64) -> Result<(), DemandError> {
        let in_range = |idx: &[usize]| idx.iter().all(|&v| v < self.n);
        let ok_shape = match c {
            Component::Direct2(i, j) | Component::Cyclic2(i, j) => in_range(&[i, j]),
            Component::Direct3(i, j, k) | Component::Cyclic3(i, j, k) => in_range(&[i, j, k]),
            _ => false,
        };
        if !ok_shape {
            return Err(DemandError::NotOffboard(c));
        }
        if c.is_degenerate() {
            return Err(DemandError::Degenerate(c));
        }
        if !(volume.is_finite() && volume >= 0.0) {
            return Err(DemandError::BadVolume(volume));
        }
        let (s, idx) = self.slot(c).expect("off-board component has a slot");
        self.store_mut(s)[idx] += volume;
        Ok(())
    }

    /// Accumulated satisfied volume `S`.
    pub fn satisfied(&self) -> f64 {
        self.satisfied
    }

    /// Unloads everything truck `truck` carries whose next stop is `node`.
    pub fn dropoff(&mut self, truck: Truck, node: Node) -> Dropoff {
        let n = self.n;
        let mut out = Dropoff::default();

        let e1 = m1(n, truck, node);
        let v = self.onboard1[e1];
        if v > 0.0 {
            self.onboard1[e1] = 0.0;
            self.satisfied += v;
            out.satisfied += v;
            out.dropped += v;
            out.transfers.push(Transfer {
                from: Component::Onboard1(truck, node),
                to: Component::Satisfied,
                volume: v,
            });
        }

        let base2 = truck * n * n + node * n;
        for j in 0..n {
            let v = self.onboard2[base2 + j];
            if v > 0.0 {
                self.onboard2[base2 + j] = 0.0;
                let d = self.i2(node, j);
                self.direct2[d] += v;
                out.dropped += v;
                out.transfers.push(Transfer {
                    from: Component::Onboard2(truck, node, j),
                    to: Component::Direct2(node, j),
                    volume: v,
                });
            }
        }

        let base3 = truck * n * n * n + node * n * n;
        for j in 0..n {
            for k in 0..n {
                let v = self.onboard3[base3 + j * n + k];
                if v > 0.0 {
                    self.onboard3[base3 + j * n + k] = 0.0;
                    let d = self.i3(node, j, k);
                    self.direct3[d] += v;
                    out.dropped += v;
                    out.transfers.push(Transfer {
                        from: Component::Onboard3(truck, node, j, k),
                        to: Component::Direct3(node, j, k),
                        volume: v,
                    });
                }
            }
        }
        out
    }

    /// Loads off-board demand at `node` onto `truck`, up to `capacity_free`.
    ///
    /// Components are taken rank 3 before rank 2, lexicographically by index
    /// within a rank, cyclic before direct on equal indices. Each is loaded in
    /// full until capacity runs out; the last one may be split.
    pub fn pickup(&mut self, truck: Truck, node: Node, capacity_free: f64) -> Pickup {
        let n = self.n;
        let mut out = Pickup::default();
        let mut room = capacity_free.clamp(0.0, 1.0);
        if room <= 0.0 {
            return out;
        }

        'rank3: for j in 0..n {
            for k in 0..n {
                let src = self.i3(node, j, k);
                for cyclic in [true, false] {
                    let (from, to, vol) = if cyclic {
                        (
                            Component::Cyclic3(node, j, k),
                            Component::Onboard3(truck, j, k, node),
                            self.cyclic3[src],
                        )
                    } else {
                        (
                            Component::Direct3(node, j, k),
                            Component::Onboard2(truck, j, k),
                            self.direct3[src],
                        )
                    };
                    if vol > 0.0 {
                        let take = self.take(from, to, vol, room, &mut out);
                        room -= take;
                        if room <= 0.0 {
                            break 'rank3;
                        }
                    }
                }
            }
        }
        if room > 0.0 {
            'rank2: for j in 0..n {
                let src = self.i2(node, j);
                for cyclic in [true, false] {
                    let (from, to, vol) = if cyclic {
                        (
                            Component::Cyclic2(node, j),
                            Component::Onboard2(truck, j, node),
                            self.cyclic2[src],
                        )
                    } else {
                        (Component::Direct2(node, j), Component::Onboard1(truck, j), self.direct2[src])
                    };
                    if vol > 0.0 {
                        let take = self.take(from, to, vol, room, &mut out);
                        room -= take;
                        if room <= 0.0 {
                            break 'rank2;
                        }
                    }
                }
            }
        }
        out
    }

    fn take(&mut self, from: Component, to: Component, available: f64, room: f64, out: &mut Pickup) -> f64 {
        let (fs, fi) = self.slot(from).expect("pickup source has a slot");
        let (ts, ti) = self.slot(to).expect("pickup target has a slot");
        let take = if available - room <= VOLUME_EPS {
            self.store_mut(fs)[fi] = 0.0;
            available
        } else {
            self.store_mut(fs)[fi] = available - room;
            room
        };
        self.store_mut(ts)[ti] += take;
        out.loaded += take;
        out.transfers.push(Transfer { from, to, volume: take });
        take
    }

    /// Myopic in/out off-board demand per node and next-stop on-board demand
    /// per truck and node.
    pub fn myopic_views(&self) -> MyopicViews {
        let n = self.n;
        let mut delta_out = vec![0.0; n];
        let mut delta_in = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let v = self.direct2[i * n + j] + self.cyclic2[i * n + j];
                delta_out[i] += v;
                delta_in[j] += v;
                let row = (i * n + j) * n;
                let mut s = 0.0;
                for k in 0..n {
                    s += self.direct3[row + k] + self.cyclic3[row + k];
                }
                delta_out[i] += s;
                delta_in[j] += s;
            }
        }
        let epsilon = (0..self.trucks).map(|m| self.next_stop_load(m)).collect();
        MyopicViews { delta_out, delta_in, epsilon }
    }

    /// `epsilon[i]` for a single truck.
    pub fn next_stop_load(&self, truck: Truck) -> Vec<f64> {
        let n = self.n;
        let o1 = &self.onboard1[truck * n..(truck + 1) * n];
        let o2 = &self.onboard2[truck * n * n..(truck + 1) * n * n];
        let o3 = &self.onboard3[truck * n * n * n..(truck + 1) * n * n * n];
        (0..n)
            .map(|i| o1[i] + o2[i * n..(i + 1) * n].iter().sum::<f64>() + o3[i * n * n..(i + 1) * n * n].iter().sum::<f64>())
            .collect()
    }

    /// Rank-2 demand summary `D[i][j] = sum_k Dtot[i][j][k] + Dtot[i][j]`,
    /// row-major `n x n`.
    pub fn pair_demand(&self) -> Vec<f64> {
        let n = self.n;
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let row = (i * n + j) * n;
                let mut s = self.direct2[i * n + j] + self.cyclic2[i * n + j];
                for k in 0..n {
                    s += self.direct3[row + k] + self.cyclic3[row + k];
                }
                d[i * n + j] = s;
            }
        }
        d
    }

    /// Rank-3 off-board total `Dtot[i][j][k]` (cyclic + direct), row-major.
    pub fn triple_demand(&self) -> Vec<f64> {
        self.direct3.iter().zip(&self.cyclic3).map(|(a, b)| a + b).collect()
    }

    /// Rank-2 off-board total `Dtot[i][j]` (cyclic + direct), row-major.
    pub fn rank2_demand(&self) -> Vec<f64> {
        self.direct2.iter().zip(&self.cyclic2).map(|(a, b)| a + b).collect()
    }

    pub fn total_offboard(&self) -> f64 {
        sum(&self.direct2) + sum(&self.direct3) + sum(&self.cyclic2) + sum(&self.cyclic3)
    }

    pub fn total_onboard(&self) -> f64 {
        sum(&self.onboard1) + sum(&self.onboard2) + sum(&self.onboard3)
    }

    /// Volume carried by one truck.
    pub fn onboard_of(&self, truck: Truck) -> f64 {
        self.next_stop_load(truck).iter().sum()
    }

    /// Everything not yet satisfied, off-board and on-board.
    pub fn total_remaining(&self) -> f64 {
        self.total_offboard() + self.total_onboard()
    }

    /// Satisfied plus remaining; constant over an episode.
    pub fn conserved_total(&self) -> f64 {
        self.satisfied + self.total_remaining()
    }

    /// Fraction of `initial_total` that has been satisfied.
    pub fn coverage(&self, initial_total: f64) -> f64 {
        assert!(initial_total > 0.0, "coverage needs a positive initial total");
        (self.satisfied / initial_total).clamp(0.0, 1.0)
    }

    /// Nonzero components, in a fixed order.
    pub fn nonzero_components(&self) -> Vec<(Component, f64)> {
        let n = self.n;
        let mut out = Vec::new();
        let mut push = |c: Component, v: f64| {
            if v != 0.0 {
                out.push((c, v));
            }
        };
        for i in 0..n {
            for j in 0..n {
                push(Component::Direct2(i, j), self.direct2[i * n + j]);
                push(Component::Cyclic2(i, j), self.cyclic2[i * n + j]);
                for k in 0..n {
                    let idx = (i * n + j) * n + k;
                    push(Component::Direct3(i, j, k), self.direct3[idx]);
                    push(Component::Cyclic3(i, j, k), self.cyclic3[idx]);
                }
            }
        }
        for m in 0..self.trucks {
            for i in 0..n {
                push(Component::Onboard1(m, i), self.onboard1[m * n + i]);
                for j in 0..n {
                    push(Component::Onboard2(m, i, j), self.onboard2[m * n * n + i * n + j]);
                    for k in 0..n {
                        push(Component::Onboard3(m, i, j, k), self.onboard3[m * n * n * n + (i * n + j) * n + k]);
                    }
                }
            }
        }
        out
    }

    /// Components that are nonzero although their index pattern is
    /// degenerate. Always empty for a state produced by the transitions.
    pub fn degenerate_violations(&self) -> Vec<Component> {
        self.nonzero_components()
            .into_iter()
            .filter(|(c, _)| c.is_degenerate())
            .map(|(c, _)| c)
            .collect()
    }

    /// Smallest component value (negative means an invariant broke).
    pub fn min_component(&self) -> f64 {
        [
            &self.direct2,
            &self.direct3,
            &self.cyclic2,
            &self.cyclic3,
            &self.onboard1,
            &self.onboard2,
            &self.onboard3,
        ]
        .iter()
        .flat_map(|v| v.iter().copied())
        .fold(self.satisfied, f64::min)
    }
}

#[inline]
fn m1(n: usize, truck: Truck, node: Node) -> usize {
    truck * n + node
}

fn sum(v: &[f64]) -> f64 {
    v.iter().sum()
}

#[derive(Debug, Clone, Copy)]
enum Store {
    Direct2,
    Direct3,
    Cyclic2,
    Cyclic3,
    Onboard1,
    Onboard2,
    Onboard3,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DemandError {
    #[error("{0:?} is not an in-range off-board component")]
    NotOffboard(Component),
    #[error("{0:?} has a degenerate index pattern")]
    Degenerate(Component),
    #[error("demand volume must be finite and nonnegative, got {0}")]
    BadVolume(f64),
}
