//! Every primitive's adjoint against central differences, plus softmax and
//! batch-norm properties.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvrp_autodiff::{grad_check, GradCheckOptions, Mat, ParamId, ParamStore, Tape, Var};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn store_with(shapes: &[(usize, usize)], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ids = shapes.iter().enumerate().map(|(i, &(r, c))| s.add(format!("p{i}"), random(r, c, &mut rng))).collect();
    (s, ids)
}

fn check(store: &ParamStore, f: impl Fn(&mut Tape<f64>, &ParamStore) -> Var) {
    let report = grad_check(store, f, GradCheckOptions { floor: 1e-8, tolerance: 1e-6, ..GradCheckOptions::default() });
    assert!(report.passed, "{report:#?}");
}

/// Reduces any matrix to a scalar with a fixed, non-symmetric weighting.
fn weighted_sum(t: &mut Tape<f64>, v: Var) -> Var {
    let (r, c) = t.value(v).shape();
    let w = t.constant(Mat::from_fn(r, c, |i, j| 0.3 + 0.17 * i as f64 - 0.11 * j as f64));
    t.dot(v, w)
}

#[test]
fn products_and_sums() {
    let (s, p) = store_with(&[(3, 4), (4, 2), (3, 2), (1, 2), (1, 1)], 1);
    check(&s, |t, s| {
        let (a, b, c, row, k) = (t.param(s, p[0]), t.param(s, p[1]), t.param(s, p[2]), t.param(s, p[3]), t.param(s, p[4]));
        let ab = t.matmul(a, b);
        let x = t.add(ab, c);
        let x = t.sub(x, c);
        let x = t.add_row(x, row);
        let cm = t.mul(x, c);
        let y = t.matmul_t(cm, c);
        let y = t.scale_by(y, k);
        let y = t.add_scalar(y, k);
        let y = t.scale(y, 0.7);
        weighted_sum(t, y)
    });
}

#[test]
fn shape_ops() {
    let (s, p) = store_with(&[(3, 2), (3, 3), (2, 5)], 2);
    check(&s, |t, s| {
        let (a, b, c) = (t.param(s, p[0]), t.param(s, p[1]), t.param(s, p[2]));
        let ab = t.concat_cols(&[a, b, a]);
        let sl = t.slice_cols(ab, 1, 5);
        let st = t.concat_rows(&[sl, c, sl]);
        let g = t.gather_rows(st, &[4, 0, 0, 7, 2]);
        let e = t.pick(g, 2, 3);
        let m = t.mean(g);
        let v = weighted_sum(t, g);
        let v = t.add(v, e);
        t.add(v, m)
    });
}

#[test]
fn nonlinearities() {
    let (s, p) = store_with(&[(3, 4)], 3);
    check(&s, |t, s| {
        let a = t.param(s, p[0]);
        let th = t.tanh(a);
        let re = t.relu(a);
        let sq = t.mul(a, a);
        let one = t.constant(Mat::filled(3, 4, 1.0));
        let pos = t.add(sq, one);
        let ln = t.ln(pos);
        let sm = t.softmax_rows(a);
        let mask = [false, true, false, false, false, false, true, false, true, false, false, false];
        let masked = t.masked_fill(a, &mask);
        let ls = t.log_softmax_rows(masked);
        // masked log-probabilities are about -1e9; keep them out of the sum
        // so the finite differences stay well conditioned
        let keep = t.constant(Mat::new(3, 4, mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect()));
        let ls = t.mul(ls, keep);
        let x = t.add(th, re);
        let x = t.add(x, ln);
        let x = t.add(x, sm);
        let x = t.add(x, ls);
        weighted_sum(t, x)
    });
}

#[test]
fn batch_norm_train_and_eval() {
    let (s, p) = store_with(&[(5, 3), (1, 3), (1, 3)], 4);
    check(&s, |t, s| {
        let (x, g, b) = (t.param(s, p[0]), t.param(s, p[1]), t.param(s, p[2]));
        let (y, _) = t.batch_norm_train(x, g, b);
        let z = t.batch_norm_eval(y, g, b, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0]);
        let z = t.tanh(z);
        weighted_sum(t, z)
    });
}

#[test]
fn dropout_adjoint_uses_the_same_mask() {
    let (s, p) = store_with(&[(4, 4)], 5);
    check(&s, |t, s| {
        let a = t.param(s, p[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = t.dropout(a, 0.3, &mut rng);
        weighted_sum(t, d)
    });
}

#[test]
fn batch_stats_are_reported() {
    let mut t = Tape::<f64>::new();
    let mut s = ParamStore::new();
    let g = s.add("g", Mat::row_vector(vec![1.0]));
    let b = s.add("b", Mat::row_vector(vec![0.0]));
    let (gv, bv) = (t.param(&s, g), t.param(&s, b));
    let x = t.constant(Mat::col_vector(vec![1.0, 3.0]));
    let (y, stats) = t.batch_norm_train(x, gv, bv);
    assert_eq!(stats.mean, vec![2.0]);
    assert_eq!(stats.var, vec![1.0]);
    let v = t.value(y);
    assert!((v.at(0, 0) + 1.0).abs() < 1e-5 && (v.at(1, 0) - 1.0).abs() < 1e-5);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12), mask in proptest::collection::vec(any::<bool>(), 12)) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Mat::new(3, 4, vals.iter().map(|&v| v as f32).collect()));
        let mut mask = mask;
        for r in 0..3 {
            mask[r * 4] = false; // keep one entry per row
        }
        let m = t.masked_fill(x, &mask);
        let p = t.softmax_rows(m);
        let pv = t.value(p);
        for r in 0..3 {
            let s: f32 = pv.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for c in 0..4 {
                if mask[r * 4 + c] {
                    prop_assert!((pv.at(r, c) as f64) < 1e-30);
                }
            }
        }
    }
}
