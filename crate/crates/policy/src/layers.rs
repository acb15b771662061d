//! Building blocks: linear maps, batch normalization, feedforward
//! sublayers, multi-head attention with source terms and dynamical masking,
//! and tensor attention over node tuples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tvrp_autodiff::{BnBatchStats, Mat, ParamId, ParamStore, Real, Tape, Var, MASK_VALUE};

use crate::PolicyError;

/// Floor applied to demand before taking its logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

/// Largest number of values a tensor-attention layer may materialize for
/// its tuple embeddings (`n^r * r * width`).
pub const TENSOR_VALUE_LIMIT: usize = 1 << 26;

/// How batch normalization obtains its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Statistics of the rows being normalized.
    #[default]
    Batch,
    /// Stored running statistics.
    Running,
}

/// Batch statistics seen by one normalization layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnObservation {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BnBatchStats,
}

/// Per-pass switches: normalization mode, dropout randomness and an
/// optional sink for batch statistics.
#[derive(Debug, Clone, Default)]
pub struct RunMode {
    pub norm: NormMode,
    /// Dropout is active only when a generator is present.
    pub dropout: Option<ChaCha8Rng>,
    pub bn_stats: Option<Vec<BnObservation>>,
}

impl RunMode {
    pub fn running() -> Self {
        Self { norm: NormMode::Running, ..Self::default() }
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

/// Registers a `rows x cols` weight drawn from `U(-b, b)`, `b = scale / sqrt(fan_in)`.
pub(crate) fn weight(
    store: &mut ParamStore,
    name: String,
    rows: usize,
    cols: usize,
    fan_in: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    store.add(name, uniform(rows, cols, scale / (fan_in as f64).sqrt(), rng))
}

/// Row-vector input times a weight, plus an optional bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = weight(store, format!("{name}.w"), d_in, d_out, d_in, scale, rng);
        let b = bias.then(|| weight(store, format!("{name}.b"), 1, d_out, d_in, scale, rng));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore, x: Var) -> Var {
        let w = t.param(s, self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(s, b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, dim)),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Mat::zeros(1, dim)),
            running_var: store.add_buffer(format!("{name}.running_var"), Mat::filled(1, dim, 1.0)),
        }
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore, x: Var, mode: &mut RunMode) -> Var {
        let (g, b) = (t.param(s, self.gamma), t.param(s, self.beta));
        match mode.norm {
            NormMode::Batch => {
                let (y, stats) = t.batch_norm_train(x, g, b);
                if let Some(sink) = mode.bn_stats.as_mut() {
                    sink.push(BnObservation { mean: self.running_mean, var: self.running_var, stats });
                }
                y
            }
            NormMode::Running => {
                let (mean, var) = (s.get(self.running_mean).data(), s.get(self.running_var).data());
                t.batch_norm_eval(x, g, b, mean, var)
            }
        }
    }
}

/// Linear, ReLU, dropout, linear.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), dim, hidden, true, 1.0, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, dim, true, 1.0, rng),
            dropout,
        }
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore, x: Var, mode: &mut RunMode) -> Var {
        let h = self.l1.forward(t, s, x);
        let mut h = t.relu(h);
        if let Some(rng) = mode.dropout.as_mut() {
            h = t.dropout(h, self.dropout, rng);
        }
        self.l2.forward(t, s, h)
    }
}

/// Pair-demand inputs of dynamical masking for one `n x n` demand matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub n: usize,
    /// `M_ij`: 1 where `D_ij > 0`, else 0.
    pub indicator: Mat<f64>,
    /// `log max(D_ij, LOG_FLOOR)`.
    pub log_demand: Mat<f64>,
    pub demand: Mat<f64>,
    /// Entries with `D_ij = 0`, masked while the mask coefficient is positive.
    pub zero: Vec<bool>,
}

impl Gate {
    /// `pair` is row-major `n x n` and nonnegative.
    pub fn new(pair: &[f64], n: usize) -> Self {
        assert_eq!(pair.len(), n * n, "pair demand must be n x n");
        Self {
            n,
            indicator: Mat::new(n, n, pair.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()),
            log_demand: Mat::new(n, n, pair.iter().map(|&v| v.max(LOG_FLOOR).ln()).collect()),
            demand: Mat::new(n, n, pair.to_vec()),
            zero: pair.iter().map(|&v| v <= 0.0).collect(),
        }
    }

    /// `G_ij = a_basic + a_mask M_ij + a_log log D_ij + a_lin D_ij` for
    /// coefficients `(a_basic, a_mask, a_log, a_lin)`. Masked entries hold
    /// [`MASK_VALUE`], standing in for the `-inf` of `M_ij`.
    pub fn matrix(&self, coeffs: [f64; 4]) -> Vec<f64> {
        let [basic, mask, log, lin] = coeffs;
        (0..self.n * self.n)
            .map(|k| {
                if mask > 0.0 && self.zero[k] {
                    MASK_VALUE
                } else {
                    basic + mask * self.indicator.data()[k] + log * self.log_demand.data()[k] + lin * self.demand.data()[k]
                }
            })
            .collect()
    }
}

/// Pure evaluation of the dynamical-masking matrix `G^s` for one head.
pub fn dynamical_mask_g(pair: &[f64], n: usize, coeffs: [f64; 4]) -> Vec<f64> {
    Gate::new(pair, n).matrix(coeffs)
}

/// Tape constants of a [`Gate`], created once per attention call.
struct GateVars<'a> {
    gate: &'a Gate,
    indicator: Var,
    log_demand: Var,
    demand: Var,
}

/// Multi-head attention. Queries come from `query` rows, keys and values
/// from `nodes` rows, optionally with source terms and dynamical masking.
#[derive(Debug, Clone)]
pub struct Mha {
    pub heads: usize,
    pub alpha: usize,
    pub beta: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Source vectors for keys and values, one row per source.
    pub sources: Option<(ParamId, ParamId)>,
    /// Rows `(basic, mask, log, lin)`, one column per head.
    pub gate: Option<ParamId>,
    pub merge: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct MhaShape {
    pub query_dim: usize,
    pub node_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub alpha: usize,
    pub beta: usize,
    pub num_sources: usize,
    pub gated: bool,
}

impl Mha {
    pub fn new(store: &mut ParamStore, name: &str, shape: MhaShape, rng: &mut ChaCha8Rng) -> Self {
        let MhaShape { query_dim, node_dim, out_dim, heads, alpha, beta, num_sources, gated } = shape;
        let wq = weight(store, format!("{name}.wq"), query_dim, heads * alpha, query_dim, 1.0, rng);
        let wk = weight(store, format!("{name}.wk"), node_dim, heads * alpha, node_dim, 1.0, rng);
        let wv = weight(store, format!("{name}.wv"), node_dim, heads * beta, node_dim, 1.0, rng);
        let sources = (num_sources > 0).then(|| {
            (
                weight(store, format!("{name}.uk"), num_sources, heads * alpha, num_sources, 1.0, rng),
                weight(store, format!("{name}.uv"), num_sources, heads * beta, num_sources, 1.0, rng),
            )
        });
        let gate = gated.then(|| {
            let init = Mat::from_fn(4, heads, |r, _| if r == 1 { 1.0 } else { 0.0 });
            store.add(format!("{name}.gate"), init)
        });
        let merge = Linear::new(store, &format!("{name}.wo"), heads * beta, out_dim, true, 1.0, rng);
        Self { heads, alpha, beta, wq, wk, wv, sources, gate, merge }
    }

    /// `sources` is `nodes.rows x num_sources`; `gate` must be given for a
    /// gated layer (self-attention over `n` nodes).
    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore,
        query: Var,
        nodes: Var,
        sources: Option<Var>,
        gate: Option<&Gate>,
    ) -> Var {
        self.attend(t, s, query, nodes, sources, gate).0
    }

    /// Like [`Mha::forward`], also returning the attention weights `rho`
    /// of every head.
    pub fn attend<T: Real>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore,
        query: Var,
        nodes: Var,
        sources: Option<Var>,
        gate: Option<&Gate>,
    ) -> (Var, Vec<Var>) {
        let (wq, wk, wv) = (t.param(s, self.wq), t.param(s, self.wk), t.param(s, self.wv));
        let q = t.matmul(query, wq);
        let mut k = t.matmul(nodes, wk);
        let mut v = t.matmul(nodes, wv);
        if let (Some((uk, uv)), Some(src)) = (self.sources, sources) {
            let (uk, uv) = (t.param(s, uk), t.param(s, uv));
            let sk = t.matmul(src, uk);
            let sv = t.matmul(src, uv);
            k = t.add(k, sk);
            v = t.add(v, sv);
        }
        let coeffs = self.gate.map(|id| t.param(s, id));
        let gate_vars = match (coeffs, gate) {
            (Some(_), Some(g)) => Some(GateVars {
                gate: g,
                indicator: t.constant_f64(&g.indicator),
                log_demand: t.constant_f64(&g.log_demand),
                demand: t.constant_f64(&g.demand),
            }),
            (Some(_), None) => panic!("gated attention called without demand"),
            _ => None,
        };
        let scale = 1.0 / (self.alpha as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * self.alpha, self.alpha);
            let kh = t.slice_cols(k, h * self.alpha, self.alpha);
            let vh = t.slice_cols(v, h * self.beta, self.beta);
            let u = t.matmul_t(qh, kh);
            let mut u = t.scale(u, scale);
            if let (Some(c), Some(gv)) = (coeffs, gate_vars.as_ref()) {
                let g = gate_matrix(t, c, h, gv);
                u = t.mul(g, u);
                if t.value(c).at(1, h) > T::zero() {
                    u = t.masked_fill(u, &gv.gate.zero);
                }
            }
            let rho = t.softmax_rows(u);
            weights.push(rho);
            outs.push(t.matmul(rho, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        (self.merge.forward(t, s, cat), weights)
    }
}

fn gate_matrix<T: Real>(t: &mut Tape<T>, coeffs: Var, head: usize, gv: &GateVars<'_>) -> Var {
    let basic = t.pick(coeffs, 0, head);
    let mask = t.pick(coeffs, 1, head);
    let log = t.pick(coeffs, 2, head);
    let lin = t.pick(coeffs, 3, head);
    let a = t.scale_by(gv.indicator, mask);
    let b = t.scale_by(gv.log_demand, log);
    let c = t.scale_by(gv.demand, lin);
    let g = t.add(a, b);
    let g = t.add(g, c);
    t.add_scalar(g, basic)
}

/// Attention whose keys and values live on `rank`-tuples of nodes:
/// `K_{a1..ar} = M^key (h_a1 ⊕ .. ⊕ h_ar) + Σ_k u_k D^(k)_{a1..ar}`, with
/// the block of `M^key` acting on position `p` stored as `wk.p`.
#[derive(Debug, Clone)]
pub struct TensorAttention {
    pub rank: usize,
    pub heads: usize,
    pub alpha: usize,
    pub beta: usize,
    pub node_dim: usize,
    pub wq: ParamId,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub uk: ParamId,
    pub uv: ParamId,
    pub num_sources: usize,
    pub merge: Linear,
}

impl TensorAttention {
    pub fn new(store: &mut ParamStore, name: &str, rank: usize, shape: MhaShape, rng: &mut ChaCha8Rng) -> Self {
        let MhaShape { node_dim, out_dim, heads, alpha, beta, num_sources, .. } = shape;
        assert!(num_sources > 0, "tensor attention needs at least one source");
        let fan = rank * node_dim;
        let wq = weight(store, format!("{name}.wq"), node_dim, heads * alpha, node_dim, 1.0, rng);
        let wk = (0..rank).map(|p| weight(store, format!("{name}.wk.{p}"), node_dim, heads * alpha, fan, 1.0, rng)).collect();
        let wv = (0..rank).map(|p| weight(store, format!("{name}.wv.{p}"), node_dim, heads * beta, fan, 1.0, rng)).collect();
        let uk = weight(store, format!("{name}.uk"), num_sources, heads * alpha, num_sources, 1.0, rng);
        let uv = weight(store, format!("{name}.uv"), num_sources, heads * beta, num_sources, 1.0, rng);
        let merge = Linear::new(store, &format!("{name}.wo"), heads * beta, out_dim, true, 1.0, rng);
        Self { rank, heads, alpha, beta, node_dim, wq, wk, wv, uk, uv, num_sources, merge }
    }

    /// Refuses node counts whose tuple embeddings would exceed
    /// [`TENSOR_VALUE_LIMIT`] values.
    pub fn check_size(&self, n: usize) -> Result<usize, PolicyError> {
        let tuples = n.checked_pow(self.rank as u32);
        let values = tuples.and_then(|c| c.checked_mul(self.rank * self.node_dim));
        match (tuples, values) {
            (Some(tuples), Some(values)) if values <= TENSOR_VALUE_LIMIT => Ok(tuples),
            _ => Err(PolicyError::TensorTooLarge {
                nodes: n,
                rank: self.rank,
                width: self.node_dim,
                values: values.unwrap_or(usize::MAX),
                limit: TENSOR_VALUE_LIMIT,
            }),
        }
    }

    /// `sources[k]` holds `D^(k)` flattened row-major over tuples.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore, nodes: Var, sources: &[Vec<f64>]) -> Result<Var, PolicyError> {
        Ok(self.attend(t, s, nodes, sources)?.0)
    }

    /// Like [`TensorAttention::forward`], also returning the `n x n^r`
    /// tuple weights of every head.
    pub fn attend<T: Real>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore,
        nodes: Var,
        sources: &[Vec<f64>],
    ) -> Result<(Var, Vec<Var>), PolicyError> {
        let n = t.value(nodes).rows();
        let tuples = self.check_size(n)?;
        assert_eq!(sources.len(), self.num_sources, "source count mismatch");
        let wq = t.param(s, self.wq);
        let q = t.matmul(nodes, wq);
        let k = self.tuple_embed(t, s, nodes, &self.wk, n, tuples);
        let v = self.tuple_embed(t, s, nodes, &self.wv, n, tuples);
        let src = Mat::from_fn(tuples, self.num_sources, |r, c| sources[c][r]);
        let src = t.constant_f64(&src);
        let (uk, uv) = (t.param(s, self.uk), t.param(s, self.uv));
        let sk = t.matmul(src, uk);
        let sv = t.matmul(src, uv);
        let k = t.add(k, sk);
        let v = t.add(v, sv);
        let scale = 1.0 / (self.alpha as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * self.alpha, self.alpha);
            let kh = t.slice_cols(k, h * self.alpha, self.alpha);
            let vh = t.slice_cols(v, h * self.beta, self.beta);
            let u = t.matmul_t(qh, kh);
            let u = t.scale(u, scale);
            let rho = t.softmax_rows(u);
            weights.push(rho);
            outs.push(t.matmul(rho, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        Ok((self.merge.forward(t, s, cat), weights))
    }

    fn tuple_embed<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore, nodes: Var, maps: &[ParamId], n: usize, tuples: usize) -> Var {
        let mut acc: Option<Var> = None;
        for (p, &id) in maps.iter().enumerate() {
            let w = t.param(s, id);
            let per_node = t.matmul(nodes, w);
            let idx = tuple_position(n, self.rank, p, tuples);
            let g = t.gather_rows(per_node, &idx);
            acc = Some(match acc {
                Some(a) => t.add(a, g),
                None => g,
            });
        }
        acc.expect("rank is at least 1")
    }
}

/// Node at position `p` of every row-major `rank`-tuple.
pub fn tuple_position(n: usize, rank: usize, p: usize, tuples: usize) -> Vec<usize> {
    let stride = n.pow((rank - 1 - p) as u32);
    (0..tuples).map(|t| (t / stride) % n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gate_examples() {
        let pair = [0.0, 2.0, std::f64::consts::E, 0.0];
        assert!(dynamical_mask_g(&pair, 2, [1.0, 0.0, 0.0, 0.0]).iter().all(|&g| g == 1.0));
        let g = dynamical_mask_g(&pair, 2, [0.0, 0.0, 1.0, 0.0]);
        assert!((g[2] - 1.0).abs() < 1e-15);
        assert!((g[0] - LOG_FLOOR.ln()).abs() < 1e-12);
        let g = dynamical_mask_g(&pair, 2, [0.5, 1.0, 0.0, 2.0]);
        assert_eq!(g[0], MASK_VALUE);
        assert_eq!(g[3], MASK_VALUE);
        assert_eq!(g[1], 0.5 + 1.0 + 4.0);
    }

    #[test]
    fn tuple_positions_are_row_major() {
        assert_eq!(tuple_position(3, 2, 0, 9), vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        assert_eq!(tuple_position(3, 2, 1, 9), vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
        assert_eq!(tuple_position(2, 3, 1, 8), vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn size_guard_trips() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = MhaShape { query_dim: 128, node_dim: 128, out_dim: 128, heads: 8, alpha: 16, beta: 16, num_sources: 1, gated: false };
        let ta = TensorAttention::new(&mut store, "t", 3, shape, &mut rng);
        assert!(ta.check_size(20).is_ok());
        let err = ta.check_size(60).unwrap_err();
        assert!(matches!(err, PolicyError::TensorTooLarge { nodes: 60, rank: 3, .. }));
    }

    #[test]
    fn masked_weight_vanishes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = MhaShape { query_dim: 4, node_dim: 4, out_dim: 4, heads: 1, alpha: 4, beta: 4, num_sources: 0, gated: true };
        let mha = Mha::new(&mut store, "m", shape, &mut rng);
        let mut t = Tape::<f64>::new();
        let h = t.constant(Mat::from_fn(3, 4, |r, c| if r == c { 1.0 } else { 0.1 * c as f64 }));
        let gate = Gate::new(&[0.0, 1.0, 0.5, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0], 3);
        let (_, w) = mha.attend(&mut t, &store, h, h, None, Some(&gate));
        let rho = t.value(w[0]);
        assert!(rho.at(0, 0) < 1e-30);
        assert!(rho.at(2, 2) < 1e-30);
        // a row with no demand is fully masked and falls back to uniform
        assert!((rho.at(1, 0) - 1.0 / 3.0).abs() < 1e-12);
    }
}
