//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::mat::Mat;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`
    /// so gradients near zero are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-6 }
    }
}

/// Result for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry.
    pub worst: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub options: GradCheckOptions,
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares tape gradients of `loss` against central differences for every
/// trainable parameter. `loss` must rebuild the whole computation on the
/// given tape from the given store.
pub fn grad_check<F>(store: &ParamStore, loss: F, options: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store);
    let grads = tape.backward(out).expect("loss must be scalar");
    let analytic = tape.param_grads(&grads, store);

    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let v = loss(&mut t, s);
        t.scalar(v)
    };
    let mut work = store.clone();
    let mut blocks = Vec::new();
    for id in store.trainable_ids() {
        let entry = store.entry(id);
        let zero = Mat::zeros(entry.value.rows(), entry.value.cols());
        let a = analytic.get(id).unwrap_or(&zero);
        let mut block = BlockReport { name: entry.name.clone(), entries: entry.value.len(), max_rel_err: 0.0, max_abs_err: 0.0, worst: 0 };
        for k in 0..entry.value.len() {
            let numeric = central(&mut work, id, k, options.step, &eval);
            let an = a.data()[k];
            let abs = (an - numeric).abs();
            let rel = abs / an.abs().max(numeric.abs()).max(options.floor);
            if rel > block.max_rel_err || rel.is_nan() {
                block.max_rel_err = rel;
                block.worst = k;
            }
            block.max_abs_err = block.max_abs_err.max(abs);
        }
        blocks.push(block);
    }
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    let passed = blocks.iter().all(|b| b.max_rel_err <= options.tolerance);
    GradCheckReport { options, blocks, max_rel_err, passed }
}

fn central(work: &mut ParamStore, id: ParamId, k: usize, h: f64, eval: &impl Fn(&ParamStore) -> f64) -> f64 {
    let orig = work.get(id).data()[k];
    work.get_mut(id).data_mut()[k] = orig + h;
    let plus = eval(work);
    work.get_mut(id).data_mut()[k] = orig - h;
    let minus = eval(work);
    work.get_mut(id).data_mut()[k] = orig;
    (plus - minus) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_broken_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::from_fn(3, 2, |r, c| 0.3 * r as f64 - 0.2 * c as f64 + 0.1));
        let f = |t: &mut Tape<f64>, s: &ParamStore| {
            let wv = t.param(s, w);
            let x = t.constant(Mat::new(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.2, -0.7]));
            let h = t.matmul(x, wv);
            let h = t.tanh(h);
            let p = t.log_softmax_rows(h);
            t.pick(p, 1, 0)
        };
        let report = grad_check(&store, f, GradCheckOptions::default());
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_err < 1e-7);

        // a loss whose tape lies about its derivative: relu at a kink
        let mut store = ParamStore::new();
        let v = store.add("v", Mat::scalar(0.0));
        let g = |t: &mut Tape<f64>, s: &ParamStore| {
            let x = t.param(s, v);
            let r = t.relu(x);
            t.sum(r)
        };
        assert!(!grad_check(&store, g, GradCheckOptions::default()).passed);
    }
}
