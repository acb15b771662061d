//! The full encoder-decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvrp_autodiff::{Mat, ParamStore, Real, Tape, Var};
use tvrp_core::{Instance, Observation, Truck};

use crate::config::{DemandMechanism, PolicyConfig};
use crate::layers::{BatchNorm, BnObservation, FeedForward, Gate, Linear, Mha, MhaShape, RunMode, TensorAttention};
use crate::PolicyError;

/// Demand summaries a demand-aware layer may consume, all row-major.
#[derive(Debug, Clone, Copy)]
pub struct DemandView<'a> {
    pub n: usize,
    pub delta_out: &'a [f64],
    pub delta_in: &'a [f64],
    /// `sum_k Dtot[ijk] + Dtot[ij]`.
    pub pair: &'a [f64],
    pub rank2: &'a [f64],
    pub triple: &'a [f64],
}

impl DemandView<'_> {
    /// `[delta_out | delta_in]` as an `n x 2` matrix.
    fn node_sources(&self) -> Mat<f64> {
        Mat::from_fn(self.n, 2, |i, c| if c == 0 { self.delta_out[i] } else { self.delta_in[i] })
    }

    /// Sources of a rank-`r` tensor attention layer.
    fn tensor_sources(&self, rank: usize) -> Vec<Vec<f64>> {
        match rank {
            1 => vec![self.delta_out.to_vec(), self.delta_in.to_vec()],
            2 => vec![self.pair.to_vec()],
            _ => {
                let n = self.n;
                let broadcast = (0..n * n * n).map(|t| self.rank2[t / n]).collect();
                vec![self.triple.to_vec(), broadcast]
            }
        }
    }
}

fn tensor_source_count(rank: usize) -> usize {
    match rank {
        2 => 1,
        _ => 2,
    }
}

#[derive(Debug, Clone)]
enum Attention {
    /// Plain or gated multi-head self-attention, with or without node
    /// source terms.
    Mha(Mha),
    Tensor(TensorAttention),
}

/// `h~ = BN(h + Att(h))`, `h' = BN(h~ + FF(h~))`.
#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: Attention,
    bn1: BatchNorm,
    ff: FeedForward,
    bn2: BatchNorm,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: &PolicyConfig,
        demand_aware: bool,
        node_sources: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let a = cfg.head_dim();
        let mut shape = MhaShape {
            query_dim: dim,
            node_dim: dim,
            out_dim: dim,
            heads: cfg.heads,
            alpha: a,
            beta: a,
            num_sources: if node_sources { 2 } else { 0 },
            gated: false,
        };
        let attn = match (demand_aware, cfg.mechanism) {
            (true, DemandMechanism::Tensor { rank }) => {
                shape.num_sources = tensor_source_count(rank);
                Attention::Tensor(TensorAttention::new(store, &format!("{name}.att"), rank, shape, rng))
            }
            (true, DemandMechanism::DynamicalMask) => {
                shape.gated = true;
                Attention::Mha(Mha::new(store, &format!("{name}.att"), shape, rng))
            }
            _ => Attention::Mha(Mha::new(store, &format!("{name}.att"), shape, rng)),
        };
        Self {
            attn,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, cfg.ff_hidden, cfg.dropout, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), dim),
        }
    }

    fn forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore,
        h: Var,
        demand: Option<&DemandView<'_>>,
        mode: &mut RunMode,
    ) -> Result<Var, PolicyError> {
        let att = match &self.attn {
            Attention::Mha(m) => {
                let sources = match (m.sources, demand) {
                    (Some(_), Some(d)) => Some(t.constant_f64(&d.node_sources())),
                    _ => None,
                };
                let gate = match (m.gate, demand) {
                    (Some(_), Some(d)) => Some(Gate::new(d.pair, d.n)),
                    _ => None,
                };
                m.forward(t, s, h, h, sources, gate.as_ref())
            }
            Attention::Tensor(ta) => {
                let d = demand.expect("tensor attention needs demand");
                ta.forward(t, s, h, &d.tensor_sources(ta.rank))?
            }
        };
        let x = t.add(h, att);
        let x = self.bn1.forward(t, s, x, mode);
        let f = self.ff.forward(t, s, x, mode);
        let y = t.add(x, f);
        Ok(self.bn2.forward(t, s, y, mode))
    }

    fn tensor(&self) -> Option<&TensorAttention> {
        match &self.attn {
            Attention::Tensor(ta) => Some(ta),
            Attention::Mha(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Network {
    embed: Linear,
    encoder: Vec<EncoderLayer>,
    extended: EncoderLayer,
    reducer: Option<(Linear, Linear)>,
    context: Mha,
    final_query: Linear,
    final_key: Linear,
    final_sources: Option<tvrp_autodiff::ParamId>,
}

impl Network {
    fn build(cfg: &PolicyConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let ext = cfg.extended_dim();
        let embed = Linear::new(store, "enc.embed", 4, d, true, 1.0, rng);
        let encoder = (0..cfg.encoder_layers)
            .map(|l| EncoderLayer::new(store, &format!("enc.{l}"), d, cfg, l == 0, false, rng))
            .collect();
        let extended = EncoderLayer::new(store, "dec.ext", ext, cfg, true, true, rng);
        let reducer = (cfg.num_trucks > 1).then(|| {
            (
                Linear::new(store, "dec.reduce.l1", d, cfg.reducer_dim, true, 1.0, rng),
                Linear::new(store, "dec.reduce.l2", cfg.reducer_dim, cfg.reducer_dim, true, 1.0, rng),
            )
        });
        let a = cfg.head_dim();
        let context = Mha::new(
            store,
            "dec.ctx",
            MhaShape {
                query_dim: cfg.context_dim(),
                node_dim: ext,
                out_dim: d,
                heads: cfg.heads,
                alpha: a,
                beta: a,
                num_sources: 2,
                gated: false,
            },
            rng,
        );
        // the final compatibility is not divided by sqrt(width), so the
        // query starts small enough to keep tanh out of saturation
        let final_query = Linear::new(store, "dec.final.wq", d, d, false, 1.0 / (d as f64).sqrt(), rng);
        let final_key = Linear::new(store, "dec.final.wk", ext, d, false, 1.0, rng);
        let final_sources = cfg.final_key_sources.then(|| crate::layers::weight(store, "dec.final.uk".into(), 2, d, 2, 1.0, rng));
        Self { embed, encoder, extended, reducer, context, final_query, final_key, final_sources }
    }
}

/// Encoder output for one instance, reused at every decoding step.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `n x d` encoded nodes.
    pub nodes: Var,
    pub n: usize,
    /// Divisor applied to passive remaining times.
    pub time_scale: f64,
}

/// Trucks in decoder slot order: the active truck, then the passive trucks
/// by increasing index.
pub fn slot_order(active: Truck, num_trucks: usize) -> Vec<Truck> {
    std::iter::once(active).chain((0..num_trucks).filter(|&m| m != active)).collect()
}

/// A policy: hyperparameters plus the parameter store.
#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    store: ParamStore,
    net: Network,
}

impl Policy {
    /// Randomly initialized policy.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(&config, &mut store, &mut rng);
        Ok(Self { config, store, net })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces all parameter values. Names and shapes must match.
    pub fn set_store(&mut self, store: ParamStore) -> Result<(), PolicyError> {
        check_layout(&self.store, &store)?;
        self.store = store;
        Ok(())
    }

    /// Fails when tensor attention would exceed its memory guard on `n`
    /// nodes.
    pub fn check_nodes(&self, n: usize) -> Result<(), PolicyError> {
        for layer in self.net.encoder.iter().chain(std::iter::once(&self.net.extended)) {
            if let Some(ta) = layer.tensor() {
                ta.check_size(n)?;
            }
        }
        Ok(())
    }

    /// Encoder inputs `x_i ⊕ (delta_in_init, delta_out_init)`, `n x 4`.
    pub fn encoder_inputs(&self, instance: &Instance) -> Mat<f64> {
        let views = instance.initial_state(self.config.num_trucks).myopic_views();
        let coords = instance.coords();
        Mat::from_fn(instance.num_nodes(), 4, |i, c| match c {
            0 | 1 => coords[i][c],
            2 => views.delta_in[i],
            _ => views.delta_out[i],
        })
    }

    pub fn encode<T: Real>(&self, t: &mut Tape<T>, instance: &Instance, mode: &mut RunMode) -> Result<Encoded, PolicyError> {
        let n = instance.num_nodes();
        self.check_nodes(n)?;
        let initial = instance.initial_state(self.config.num_trucks);
        let views = initial.myopic_views();
        let (pair, rank2, triple) = (initial.pair_demand(), initial.rank2_demand(), initial.triple_demand());
        let demand = DemandView {
            n,
            delta_out: &views.delta_out,
            delta_in: &views.delta_in,
            pair: &pair,
            rank2: &rank2,
            triple: &triple,
        };
        let x = t.constant_f64(&self.encoder_inputs(instance));
        let mut h = self.net.embed.forward(t, &self.store, x);
        for (l, layer) in self.net.encoder.iter().enumerate() {
            h = layer.forward(t, &self.store, h, (l == 0).then_some(&demand), mode)?;
        }
        let scale = instance.time_scale();
        let time_scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
        Ok(Encoded { nodes: h, n, time_scale })
    }

    /// Node-aligned columns appended to the encoded nodes:
    /// `delta_out`, the active truck's `epsilon`, then the passive trucks'.
    pub fn extended_columns(&self, obs: &Observation) -> Mat<f64> {
        let order = slot_order(obs.active, obs.epsilon.len());
        let n = obs.delta_out.len();
        Mat::from_fn(n, order.len() + 1, |i, c| if c == 0 { obs.delta_out[i] } else { obs.epsilon[order[c - 1]][i] })
    }

    /// Scalar parts of the context node: passive remaining times divided by
    /// `time_scale` (`T`) and capacities active-first (`C`).
    pub fn context_scalars(&self, obs: &Observation, time_scale: f64) -> (Vec<f64>, Vec<f64>) {
        let order = slot_order(obs.active, obs.capacities.len());
        let times = order[1..].iter().map(|&m| obs.remaining[m] / time_scale).collect();
        let caps = order.iter().map(|&m| obs.capacities[m]).collect();
        (times, caps)
    }

    /// Log-probabilities (`1 x n`) of the active truck's next node.
    pub fn decode<T: Real>(
        &self,
        t: &mut Tape<T>,
        enc: &Encoded,
        obs: &Observation,
        mode: &mut RunMode,
    ) -> Result<Var, PolicyError> {
        let trucks = self.config.num_trucks;
        if obs.capacities.len() != trucks {
            return Err(PolicyError::TruckCount { expected: trucks, got: obs.capacities.len() });
        }
        if !obs.mask.iter().any(|&m| m) {
            return Err(PolicyError::AllMasked);
        }
        let s = &self.store;
        let n = enc.n;
        let cols = t.constant_f64(&self.extended_columns(obs));
        let hbar = t.concat_cols(&[enc.nodes, cols]);
        let demand = DemandView {
            n,
            delta_out: &obs.delta_out,
            delta_in: &obs.delta_in,
            pair: &obs.pair_demand,
            rank2: &obs.rank2_demand,
            triple: &obs.triple_demand,
        };
        let h1 = self.net.extended.forward(t, s, hbar, Some(&demand), mode)?;

        let order = slot_order(obs.active, trucks);
        let mut parts = vec![t.gather_rows(enc.nodes, &[obs.positions[obs.active]])];
        if let Some((l1, l2)) = &self.net.reducer {
            for &m in &order[1..] {
                let z = t.gather_rows(enc.nodes, &[obs.positions[m]]);
                let r = l1.forward(t, s, z);
                let r = t.relu(r);
                parts.push(l2.forward(t, s, r));
            }
        }
        let (times, caps) = self.context_scalars(obs, enc.time_scale);
        if !times.is_empty() {
            parts.push(t.constant(Mat::from_f64(&Mat::row_vector(times))));
        }
        parts.push(t.constant(Mat::from_f64(&Mat::row_vector(caps))));
        let ctx = t.concat_cols(&parts);

        let sources = t.constant_f64(&demand.node_sources());
        let glimpse = self.net.context.forward(t, s, ctx, h1, Some(sources), None);
        let q = self.net.final_query.forward(t, s, glimpse);
        let mut k = self.net.final_key.forward(t, s, h1);
        if let Some(id) = self.net.final_sources {
            let u = t.param(s, id);
            let sk = t.matmul(sources, u);
            k = t.add(k, sk);
        }
        let u = t.matmul_t(q, k);
        let u = t.tanh(u);
        let u = t.scale(u, self.config.tanh_scale);
        let blocked: Vec<bool> = obs.mask.iter().map(|&m| !m).collect();
        let u = t.masked_fill(u, &blocked);
        Ok(t.log_softmax_rows(u))
    }

    /// Convenience: probabilities of the next node for the situation `obs`
    /// in `instance`, evaluated in double precision.
    pub fn probabilities(&self, instance: &Instance, obs: &Observation, mode: &mut RunMode) -> Result<Vec<f64>, PolicyError> {
        let mut t = Tape::<f64>::new();
        let enc = self.encode(&mut t, instance, mode)?;
        let lp = self.decode(&mut t, &enc, obs, mode)?;
        Ok(t.value(lp).data().iter().map(|v| v.exp()).collect())
    }

    /// Folds observed batch statistics into the running statistics:
    /// `running = momentum * running + (1 - momentum) * batch_mean`, where
    /// `batch_mean` averages every observation of the same layer.
    pub fn update_running_stats(&mut self, observations: &[BnObservation], momentum: f64) {
        let mut sums: Vec<(tvrp_autodiff::ParamId, tvrp_autodiff::ParamId, Vec<f64>, Vec<f64>, usize)> = Vec::new();
        for o in observations {
            match sums.iter_mut().find(|e| e.0 == o.mean) {
                Some(e) => {
                    e.2.iter_mut().zip(&o.stats.mean).for_each(|(a, b)| *a += b);
                    e.3.iter_mut().zip(&o.stats.var).for_each(|(a, b)| *a += b);
                    e.4 += 1;
                }
                None => sums.push((o.mean, o.var, o.stats.mean.clone(), o.stats.var.clone(), 1)),
            }
        }
        for (mean_id, var_id, mean, var, count) in sums {
            let c = count as f64;
            for (r, m) in self.store.get_mut(mean_id).data_mut().iter_mut().zip(&mean) {
                *r = momentum * *r + (1.0 - momentum) * m / c;
            }
            for (r, v) in self.store.get_mut(var_id).data_mut().iter_mut().zip(&var) {
                *r = momentum * *r + (1.0 - momentum) * v / c;
            }
        }
    }
}

pub(crate) fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<(), PolicyError> {
    if expected.len() != got.len() {
        return Err(PolicyError::Checkpoint(format!("expected {} tensors, found {}", expected.len(), got.len())));
    }
    for (e, g) in expected.entries().iter().zip(got.entries()) {
        if e.name != g.name || e.value.shape() != g.value.shape() || e.trainable != g.trainable {
            return Err(PolicyError::Checkpoint(format!(
                "tensor mismatch: expected {} {:?}, found {} {:?}",
                e.name,
                e.value.shape(),
                g.name,
                g.value.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tvrp_core::{DemandEntry, Env, EnvConfig};

    fn small(trucks: usize, mechanism: DemandMechanism) -> PolicyConfig {
        PolicyConfig { num_trucks: trucks, embed_dim: 8, heads: 2, ff_hidden: 6, reducer_dim: 3, encoder_layers: 2, mechanism, ..PolicyConfig::default() }
    }

    fn instance() -> Instance {
        let coords = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let demand = vec![DemandEntry::cyclic(&[1, 2], 0.4), DemandEntry::cyclic(&[2, 3, 0], 0.3), DemandEntry::direct(&[3, 1], 0.2)];
        Instance::euclidean(coords, 1.0, demand, f64::INFINITY, vec![0, 2]).unwrap()
    }

    #[test]
    fn slot_order_puts_active_first() {
        assert_eq!(slot_order(2, 4), vec![2, 0, 1, 3]);
        assert_eq!(slot_order(0, 1), vec![0]);
    }

    #[test]
    fn decode_is_a_masked_distribution() {
        let inst = std::sync::Arc::new(instance());
        for mech in [DemandMechanism::Plain, DemandMechanism::DynamicalMask, DemandMechanism::Tensor { rank: 2 }, DemandMechanism::Tensor { rank: 3 }] {
            let p = Policy::new(small(2, mech), 5).unwrap();
            let env = Env::reset(inst.clone(), EnvConfig::with_trucks(2)).unwrap();
            let obs = env.observe();
            let probs = p.probabilities(&inst, &obs, &mut RunMode::default()).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (pr, &m) in probs.iter().zip(&obs.mask) {
                if !m {
                    assert!(*pr < 1e-30);
                }
            }
        }
    }

    #[test]
    fn truck_count_is_checked() {
        let inst = std::sync::Arc::new(instance());
        let p = Policy::new(small(3, DemandMechanism::DynamicalMask), 5).unwrap();
        let env = Env::reset(inst.clone(), EnvConfig::with_trucks(2)).unwrap();
        let err = p.probabilities(&inst, &env.observe(), &mut RunMode::default()).unwrap_err();
        assert!(matches!(err, PolicyError::TruckCount { expected: 3, got: 2 }));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = Policy::new(small(1, DemandMechanism::Plain), 1).unwrap();
        let bn = p.net.encoder[0].bn1.clone();
        let stats = tvrp_autodiff::BnBatchStats { mean: vec![1.0; 8], var: vec![3.0; 8] };
        let other = tvrp_autodiff::BnBatchStats { mean: vec![3.0; 8], var: vec![5.0; 8] };
        let obs = [
            BnObservation { mean: bn.running_mean, var: bn.running_var, stats },
            BnObservation { mean: bn.running_mean, var: bn.running_var, stats: other },
        ];
        p.update_running_stats(&obs, 0.9);
        assert!(p.store().get(bn.running_mean).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(p.store().get(bn.running_var).data().iter().all(|&v| (v - (0.9 + 0.4)).abs() < 1e-15));
    }
}
