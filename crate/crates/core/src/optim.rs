//! Adaptive moment estimation over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before each step.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect::<Vec<_>>();
        Self {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips, updates every non-frozen parameter from its accumulated
    /// gradient, then zeroes all gradients. Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        let norm = store.clip_grad_norm(self.config.clip_norm);
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_frozen(id) {
                continue;
            }
            let g = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= learning_rate * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grad();
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn minimises_a_quadratic_and_skips_frozen() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![3.0, -2.0]));
        let b = store.add("b", Tensor::vector(vec![1.0]));
        store.set_frozen(b, true);
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
        );
        for _ in 0..300 {
            let vals = store.value(a).data().to_vec();
            store.grad_mut(a).data_mut().copy_from_slice(&[2.0 * vals[0], 2.0 * vals[1]]);
            store.grad_mut(b).data_mut()[0] = 1.0;
            opt.step(&mut store);
        }
        assert!(store.value(a).data().iter().all(|x| x.abs() < 1e-2));
        assert_eq!(store.value(b).data(), &[1.0]);
        assert_eq!(store.grad_norm(), 0.0);
    }
}
