//! Straight-line reimplementation of the policy forward pass with plain
//! nested loops, reading parameters by name.

#![allow(dead_code)]

use std::sync::Arc;

use tvrp_core::{DemandEntry, Env, EnvConfig, Instance, Observation};
use tvrp_policy::Policy;

pub type M = Vec<Vec<f64>>;

pub struct Naive<'a> {
    pub policy: &'a Policy,
}

impl Naive<'_> {
    pub fn p(&self, name: &str) -> M {
        let s = self.policy.store();
        let id = s.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let m = s.get(id);
        (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
    }

    pub fn has(&self, name: &str) -> bool {
        self.policy.store().find(name).is_some()
    }

    pub fn linear(&self, x: &M, name: &str) -> M {
        let w = self.p(&format!("{name}.w"));
        let mut y = matmul(x, &w);
        if self.has(&format!("{name}.b")) {
            let b = self.p(&format!("{name}.b"));
            for row in y.iter_mut() {
                for (v, bb) in row.iter_mut().zip(&b[0]) {
                    *v += bb;
                }
            }
        }
        y
    }

    pub fn batch_norm(&self, x: &M, name: &str) -> M {
        let g = &self.p(&format!("{name}.gamma"))[0];
        let b = &self.p(&format!("{name}.beta"))[0];
        let (n, c) = (x.len(), x[0].len());
        let mut y = vec![vec![0.0; c]; n];
        for j in 0..c {
            let mean = (0..n).map(|i| x[i][j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x[i][j] - mean).powi(2)).sum::<f64>() / n as f64;
            for i in 0..n {
                y[i][j] = g[j] * (x[i][j] - mean) / (var + 1e-5).sqrt() + b[j];
            }
        }
        y
    }

    /// Multi-head attention with optional `(delta_out, delta_in)` sources
    /// and optional pair-demand gate.
    pub fn mha(&self, query: &M, nodes: &M, name: &str, heads: usize, sources: Option<(&[f64], &[f64])>, pair: Option<&[f64]>) -> M {
        let q = matmul(query, &self.p(&format!("{name}.wq")));
        let mut k = matmul(nodes, &self.p(&format!("{name}.wk")));
        let mut v = matmul(nodes, &self.p(&format!("{name}.wv")));
        if let Some((out, inn)) = sources {
            let uk = self.p(&format!("{name}.uk"));
            let uv = self.p(&format!("{name}.uv"));
            for a in 0..nodes.len() {
                for c in 0..k[0].len() {
                    k[a][c] += uk[0][c] * out[a] + uk[1][c] * inn[a];
                }
                for c in 0..v[0].len() {
                    v[a][c] += uv[0][c] * out[a] + uv[1][c] * inn[a];
                }
            }
        }
        let alpha = q[0].len() / heads;
        let beta = v[0].len() / heads;
        let gate = pair.map(|_| self.p(&format!("{name}.gate")));
        let n = nodes.len();
        let mut cat = vec![vec![0.0; heads * beta]; query.len()];
        for s in 0..heads {
            for i in 0..query.len() {
                let mut u = vec![0.0; n];
                for a in 0..n {
                    let mut dot = 0.0;
                    for c in 0..alpha {
                        dot += q[i][s * alpha + c] * k[a][s * alpha + c];
                    }
                    u[a] = dot / (alpha as f64).sqrt();
                    if let (Some(g), Some(d)) = (&gate, pair) {
                        let dij = d[i * n + a];
                        let ind = if dij > 0.0 { 1.0 } else { 0.0 };
                        let gij = g[0][s] + g[1][s] * ind + g[2][s] * dij.max(1e-8).ln() + g[3][s] * dij;
                        u[a] *= gij;
                        if g[1][s] > 0.0 && dij <= 0.0 {
                            u[a] = -1e9;
                        }
                    }
                }
                let rho = softmax(&u);
                for c in 0..beta {
                    cat[i][s * beta + c] = (0..n).map(|a| rho[a] * v[a][s * beta + c]).sum();
                }
            }
        }
        self.linear(&cat, &format!("{name}.wo"))
    }

    pub fn encoder_layer(&self, h: &M, name: &str, heads: usize, sources: Option<(&[f64], &[f64])>, pair: Option<&[f64]>) -> M {
        let att = self.mha(h, h, &format!("{name}.att"), heads, sources, pair);
        let x = self.batch_norm(&add(h, &att), &format!("{name}.bn1"));
        let f = self.linear(&relu(&self.linear(&x, &format!("{name}.ff.l1"))), &format!("{name}.ff.l2"));
        self.batch_norm(&add(&x, &f), &format!("{name}.bn2"))
    }

    /// Encoder with a gated first layer.
    pub fn encode(&self, inst: &Instance) -> M {
        let cfg = self.policy.config();
        let n = inst.num_nodes();
        // initial demand summaries straight from the demand entries
        let mut pair = vec![0.0; n * n];
        for e in inst.demand() {
            pair[e.nodes[0] * n + e.nodes[1]] += e.volume;
        }
        let out: Vec<f64> = (0..n).map(|i| (0..n).map(|j| pair[i * n + j]).sum()).collect();
        let inn: Vec<f64> = (0..n).map(|j| (0..n).map(|i| pair[i * n + j]).sum()).collect();
        let x: M = (0..n).map(|i| vec![inst.coords()[i][0], inst.coords()[i][1], inn[i], out[i]]).collect();
        let mut h = self.linear(&x, "enc.embed");
        for l in 0..cfg.encoder_layers {
            h = self.encoder_layer(&h, &format!("enc.{l}"), cfg.heads, None, (l == 0).then_some(&pair[..]));
        }
        h
    }

    /// Probabilities of the next node.
    pub fn decode(&self, h: &M, obs: &Observation, time_scale: f64) -> Vec<f64> {
        let cfg = self.policy.config();
        let n = h.len();
        let big_n = obs.capacities.len();
        let active = obs.active;
        let passive: Vec<usize> = (0..big_n).filter(|&m| m != active).collect();
        let hbar: M = (0..n)
            .map(|i| {
                let mut row = h[i].clone();
                row.push(obs.delta_out[i]);
                row.push(obs.epsilon[active][i]);
                for &m in &passive {
                    row.push(obs.epsilon[m][i]);
                }
                row
            })
            .collect();
        let src = (&obs.delta_out[..], &obs.delta_in[..]);
        let h1 = self.encoder_layer(&hbar, "dec.ext", cfg.heads, Some(src), Some(&obs.pair_demand));
        let mut ctx = h[obs.positions[active]].clone();
        for &m in &passive {
            let z = vec![h[obs.positions[m]].clone()];
            let r = self.linear(&relu(&self.linear(&z, "dec.reduce.l1")), "dec.reduce.l2");
            ctx.extend(&r[0]);
        }
        for &m in &passive {
            ctx.push(obs.remaining[m] / time_scale);
        }
        ctx.push(obs.capacities[active]);
        for &m in &passive {
            ctx.push(obs.capacities[m]);
        }
        let glimpse = self.mha(&vec![ctx], &h1, "dec.ctx", cfg.heads, Some(src), None);
        let q = matmul(&glimpse, &self.p("dec.final.wq.w"));
        let k = matmul(&h1, &self.p("dec.final.wk.w"));
        let u: Vec<f64> = (0..n)
            .map(|i| {
                if obs.mask[i] {
                    let dot: f64 = q[0].iter().zip(&k[i]).map(|(a, b)| a * b).sum();
                    cfg.tanh_scale * dot.tanh()
                } else {
                    -1e9
                }
            })
            .collect();
        softmax(&u)
    }
}

pub fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn relu(a: &M) -> M {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn softmax(u: &[f64]) -> Vec<f64> {
    let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Five nodes, mixed rank-2 / rank-3 cyclic and direct demand.
pub fn five_node_instance(trucks: usize) -> Arc<Instance> {
    let coords = vec![[0.1, 0.2], [0.9, 0.1], [0.7, 0.8], [0.2, 0.9], [0.5, 0.5]];
    let demand = vec![
        DemandEntry::cyclic(&[0, 1], 0.3),
        DemandEntry::cyclic(&[1, 2, 3], 0.25),
        DemandEntry::direct(&[3, 4], 0.4),
        DemandEntry::cyclic(&[4, 0, 2], 0.35),
        DemandEntry::direct(&[2, 0, 1], 0.15),
    ];
    let starts = (0..trucks).map(|m| m % 5).collect();
    Arc::new(Instance::euclidean(coords, 1.0, demand, f64::INFINITY, starts).unwrap())
}

pub fn four_node_instance(trucks: usize) -> Arc<Instance> {
    let coords = vec![[0.0, 0.0], [1.0, 0.2], [0.8, 1.0], [0.1, 0.7]];
    let demand = vec![DemandEntry::cyclic(&[0, 1], 0.3), DemandEntry::cyclic(&[1, 2, 3], 0.45), DemandEntry::direct(&[3, 2], 0.2)];
    let starts = (0..trucks).map(|m| (m + 1) % 4).collect();
    Arc::new(Instance::euclidean(coords, 1.0, demand, f64::INFINITY, starts).unwrap())
}

/// An environment advanced by `actions`, each taken when allowed and
/// otherwise replaced by the first allowed node.
pub fn advanced_env(inst: &Arc<Instance>, trucks: usize, actions: &[usize]) -> Env {
    let mut env = Env::reset(inst.clone(), EnvConfig::with_trucks(trucks)).unwrap();
    for &a in actions {
        if env.is_done() {
            break;
        }
        let mask = env.mask();
        let a = if mask[a] { a } else { mask.iter().position(|&m| m).unwrap() };
        env.step(a).unwrap();
    }
    env
}
