//! Reverse-mode tape.
//!
//! Every operation appends a node holding its value and a record of how it
//! was computed. [`Tape::backward`] walks the nodes in reverse and applies
//! each operation's adjoint.

use rand::Rng;

use crate::mat::{gemm_into, Mat, Real};
use crate::params::{ParamGrads, ParamId, ParamStore};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Value used for masked-out entries before a softmax.
pub const MASK_VALUE: f64 = -1e9;

/// Small constant added to the batch variance in batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("loss must be a 1x1 value, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    AddScalar(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaskedFill(Var, Vec<bool>),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, inv_std: Vec<T>, train: bool },
    Dropout(Var, Vec<T>),
    Pick(Var, usize, usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A computation graph under construction.
#[derive(Debug, Clone)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<Option<Var>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss with respect to `v` (`None` if unreachable or if
    /// `v` is a constant).
    pub fn wrt(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the tape had `len` nodes. Handles to
    /// the dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        for p in self.params.iter_mut() {
            if matches!(p, Some(v) if v.0 >= len) {
                *p = None;
            }
        }
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.at(0, 0)
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_f64(&mut self, value: &Mat<f64>) -> Var {
        self.constant(Mat::from_f64(value))
    }

    /// The tape's leaf for a stored parameter, created on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(Mat::from_f64(&entry.value), Op::Param, entry.trainable);
        self.params[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(false, self.value(b), true);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "add_row expects a row vector");
        assert_eq!(am.cols(), rm.cols(), "add_row width mismatch");
        let mut value = am.clone();
        for r in 0..value.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(rm.data()) {
                *o = *o + b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// `s * a` for a `1 x 1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScaleBy(a, s), ng)
    }

    /// `a + s` for a `1 x 1` value `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(a).map(|x| x + sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::AddScalar(a, s), ng)
    }

    /// Direct sum along columns: `[a | b | ...]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Stacks rows: `[a; b; ...]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "slice out of range");
        let value = Mat::from_fn(m.rows(), len, |r, c| m.at(r, start + c));
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Rows of `a` in the order given (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let cols = m.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(m.row(i));
        }
        let ng = self.ng(a);
        self.push(Mat::new(idx.len(), cols, data), Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Replaces entries where `mask` is true by [`MASK_VALUE`].
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Var {
        let m = self.value(a);
        assert_eq!(mask.len(), m.len(), "mask size mismatch");
        let fill = T::of(MASK_VALUE);
        let mut value = m.clone();
        for (v, &hit) in value.data_mut().iter_mut().zip(mask) {
            if hit {
                *v = fill;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::MaskedFill(a, mask.to_vec()), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Natural logarithm.
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        let ng = self.ng(a);
        self.push(value, Op::Ln(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Mat::scalar(m.sum() / T::of(m.len() as f64));
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Dot product of two same-shaped values, as `1 x 1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Element `(r, c)` as a `1 x 1` value.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let value = Mat::scalar(self.value(a).at(r, c));
        let ng = self.ng(a);
        self.push(value, Op::Pick(a, r, c), ng)
    }

    /// Batch normalization over the rows of `x` with per-column scale and
    /// shift (`1 x c` each). Returns the output and the batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BnBatchStats) {
        let m = self.value(x);
        let (rows, cols) = m.shape();
        let nr = T::of(rows as f64);
        let mean = m.col_sums().map(|s| s / nr);
        let mut var = Mat::<T>::zeros(1, cols);
        for r in 0..rows {
            for c in 0..cols {
                let d = m.at(r, c) - mean.at(0, c);
                var.set(0, c, var.at(0, c) + d * d);
            }
        }
        let var: Mat<T> = var.map(|s| s / nr);
        let inv_std: Vec<T> = var.data().iter().map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt()).collect();
        let xhat = Mat::from_fn(rows, cols, |r, c| (m.at(r, c) - mean.at(0, c)) * inv_std[c]);
        let stats = BnBatchStats {
            mean: mean.data().iter().map(|v| v.f64()).collect(),
            var: var.data().iter().map(|v| v.f64()).collect(),
        };
        let v = self.bn_finish(x, gamma, beta, xhat, inv_std, true);
        (v, stats)
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let m = self.value(x);
        let (rows, cols) = m.shape();
        assert_eq!(mean.len(), cols);
        assert_eq!(var.len(), cols);
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
        let xhat = Mat::from_fn(rows, cols, |r, c| (m.at(r, c) - T::of(mean[c])) * inv_std[c]);
        self.bn_finish(x, gamma, beta, xhat, inv_std, false)
    }

    fn bn_finish(&mut self, x: Var, gamma: Var, beta: Var, xhat: Mat<T>, inv_std: Vec<T>, train: bool) -> Var {
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, xhat.cols()), "batch norm scale shape");
        assert_eq!(b.shape(), (1, xhat.cols()), "batch norm shift shape");
        let value = Mat::from_fn(xhat.rows(), xhat.cols(), |r, c| g.at(0, c) * xhat.at(r, c) + b.at(0, c));
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, ng)
    }

    /// Inverted dropout with drop probability `p`. Identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let m = self.value(a);
        let mask: Vec<T> = (0..m.len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let value = Mat::new(m.rows(), m.cols(), m.data().iter().zip(&mask).map(|(&x, &k)| x * k).collect());
        let ng = self.ng(a);
        self.push(value, Op::Dropout(a, mask), ng)
    }

    /// Gradients of the `1 x 1` value `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, AutodiffError> {
        self.backward_seeded(loss, T::one())
    }

    /// Like [`Tape::backward`] with the output adjoint set to `seed`.
    pub fn backward_seeded(&self, loss: Var, seed: T) -> Result<Grads<T>, AutodiffError> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows, cols });
        }
        let mut g: Vec<Option<Mat<T>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(Mat::scalar(seed));
        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.adjoint(node, &dy, &mut g);
            }
            g[i] = Some(dy);
        }
        Ok(Grads { grads: g })
    }

    /// Parameter gradients (in `f64`) of a backward pass.
    pub fn param_grads(&self, grads: &Grads<T>, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (id, v) in self.params.iter().enumerate() {
            if let Some(v) = v {
                if store.entries()[id].trainable {
                    out.grads[id] = grads.wrt(*v).map(Mat::to_f64);
                }
            }
        }
        out
    }

    fn adjoint(&self, node: &Node<T>, dy: &Mat<T>, g: &mut [Option<Mat<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                if want(a) {
                    acc_gemm(g, a, dy, false, val(b), true);
                }
                if want(b) {
                    acc_gemm(g, b, val(a), true, dy, false);
                }
            }
            &Op::MatMulT(a, b) => {
                if want(a) {
                    acc_gemm(g, a, dy, false, val(b), false);
                }
                if want(b) {
                    acc_gemm(g, b, dy, true, val(a), false);
                }
            }
            &Op::Add(a, b) => {
                if want(a) {
                    acc(g, a, dy.clone());
                }
                if want(b) {
                    acc(g, b, dy.clone());
                }
            }
            &Op::Sub(a, b) => {
                if want(a) {
                    acc(g, a, dy.clone());
                }
                if want(b) {
                    acc(g, b, dy.map(|x| -x));
                }
            }
            &Op::AddRow(a, row) => {
                if want(a) {
                    acc(g, a, dy.clone());
                }
                if want(row) {
                    acc(g, row, dy.col_sums());
                }
            }
            &Op::Mul(a, b) => {
                if want(a) {
                    acc(g, a, dy.zip_map(val(b), |d, y| d * y));
                }
                if want(b) {
                    acc(g, b, dy.zip_map(val(a), |d, x| d * x));
                }
            }
            &Op::Scale(a, c) => {
                if want(a) {
                    acc(g, a, dy.map(|d| d * c));
                }
            }
            &Op::ScaleBy(a, s) => {
                if want(a) {
                    let sv = val(s).at(0, 0);
                    acc(g, a, dy.map(|d| d * sv));
                }
                if want(s) {
                    let ds: T = dy.data().iter().zip(val(a).data()).map(|(&d, &x)| d * x).sum();
                    acc(g, s, Mat::scalar(ds));
                }
            }
            &Op::AddScalar(a, s) => {
                if want(a) {
                    acc(g, a, dy.clone());
                }
                if want(s) {
                    acc(g, s, Mat::scalar(dy.sum()));
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if want(p) {
                        acc(g, p, Mat::from_fn(dy.rows(), w, |r, c| dy.at(r, off + c)));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if want(p) {
                        let cols = dy.cols();
                        acc(g, p, Mat::new(h, cols, dy.data()[off * cols..(off + h) * cols].to_vec()));
                    }
                    off += h;
                }
            }
            &Op::SliceCols(a, start) => {
                if want(a) {
                    let src = val(a);
                    let mut d = Mat::zeros(src.rows(), src.cols());
                    for r in 0..dy.rows() {
                        d.row_mut(r)[start..start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    acc(g, a, d);
                }
            }
            Op::GatherRows(a, idx) => {
                if want(*a) {
                    let src = val(*a);
                    let mut d = Mat::zeros(src.rows(), src.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &v) in d.row_mut(i).iter_mut().zip(dy.row(k)) {
                            *o = *o + v;
                        }
                    }
                    acc(g, *a, d);
                }
            }
            &Op::SoftmaxRows(a) => {
                if want(a) {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let s: T = yr.iter().zip(dr).map(|(&p, &q)| p * q).sum();
                        for ((o, &p), &q) in d.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *o = p * (q - s);
                        }
                    }
                    acc(g, a, d);
                }
            }
            &Op::LogSoftmaxRows(a) => {
                if want(a) {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let s: T = dr.iter().copied().sum();
                        for ((o, &ly), &q) in d.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *o = q - ly.exp() * s;
                        }
                    }
                    acc(g, a, d);
                }
            }
            Op::MaskedFill(a, mask) => {
                if want(*a) {
                    let mut d = dy.clone();
                    for (v, &hit) in d.data_mut().iter_mut().zip(mask) {
                        if hit {
                            *v = T::zero();
                        }
                    }
                    acc(g, *a, d);
                }
            }
            &Op::Tanh(a) => {
                if want(a) {
                    acc(g, a, dy.zip_map(&node.value, |d, y| d * (T::one() - y * y)));
                }
            }
            &Op::Relu(a) => {
                if want(a) {
                    acc(g, a, dy.zip_map(val(a), |d, x| if x > T::zero() { d } else { T::zero() }));
                }
            }
            &Op::Ln(a) => {
                if want(a) {
                    acc(g, a, dy.zip_map(val(a), |d, x| d / x));
                }
            }
            &Op::Sum(a) => {
                if want(a) {
                    let s = val(a);
                    acc(g, a, Mat::filled(s.rows(), s.cols(), dy.at(0, 0)));
                }
            }
            &Op::Mean(a) => {
                if want(a) {
                    let s = val(a);
                    let v = dy.at(0, 0) / T::of(s.len() as f64);
                    acc(g, a, Mat::filled(s.rows(), s.cols(), v));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                if want(beta) {
                    acc(g, beta, dy.col_sums());
                }
                if want(gamma) {
                    acc(g, gamma, dy.zip_map(xhat, |d, h| d * h).col_sums());
                }
                if want(x) {
                    let gm = val(gamma);
                    let (rows, cols) = xhat.shape();
                    let dxhat = Mat::from_fn(rows, cols, |r, c| dy.at(r, c) * gm.at(0, c));
                    let d = if *train {
                        let nr = T::of(rows as f64);
                        let s1 = dxhat.col_sums();
                        let s2 = dxhat.zip_map(xhat, |a, b| a * b).col_sums();
                        Mat::from_fn(rows, cols, |r, c| {
                            inv_std[c] / nr * (nr * dxhat.at(r, c) - s1.at(0, c) - xhat.at(r, c) * s2.at(0, c))
                        })
                    } else {
                        Mat::from_fn(rows, cols, |r, c| dxhat.at(r, c) * inv_std[c])
                    };
                    acc(g, x, d);
                }
            }
            Op::Dropout(a, mask) => {
                if want(*a) {
                    let d = Mat::new(dy.rows(), dy.cols(), dy.data().iter().zip(mask).map(|(&d, &k)| d * k).collect());
                    acc(g, *a, d);
                }
            }
            &Op::Pick(a, r, c) => {
                if want(a) {
                    let s = val(a);
                    let mut d = Mat::zeros(s.rows(), s.cols());
                    d.set(r, c, dy.at(0, 0));
                    acc(g, a, d);
                }
            }
        }
    }
}

fn acc<T: Real>(g: &mut [Option<Mat<T>>], v: Var, d: Mat<T>) {
    match &mut g[v.0] {
        Some(m) => m.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// `g[v] += op(a) * op(b)` without a temporary when possible.
fn acc_gemm<T: Real>(g: &mut [Option<Mat<T>>], v: Var, a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool) {
    match &mut g[v.0] {
        Some(m) => gemm_into(a, ta, b, tb, m, T::one()),
        slot @ None => *slot = Some(a.matmul_t(ta, b, tb)),
    }
}
