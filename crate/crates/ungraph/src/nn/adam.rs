//! Adam optimizer over named parameters.

use super::params::ParamStore;
use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the provided gradients. Parameters without a
    /// gradient entry are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Array2<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = match store.params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            assert_eq!(param.dim(), grad.dim(), "gradient shape mismatch for {name}");
            let len = param.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            for ((p, g), (mi, vi)) in param.iter_mut().zip(grad.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
