//! Adam.

use tvrp_autodiff::{Mat, ParamGrads, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Mat<f64>>>,
    v: Vec<Option<Mat<f64>>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step on every trainable parameter. Parameters without a
    /// gradient are treated as having gradient zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let (rows, cols) = p.shape();
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(rows, cols));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(rows, cols));
            let g = grads.get(id);
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                p.data_mut()[k] -= lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
            }
        }
    }
}
