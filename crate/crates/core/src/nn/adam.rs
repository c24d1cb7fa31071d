//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first and second moments per parameter plus the step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, p)| Mat::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Mat {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Mat {
        &self.v[i]
    }

    /// Applies one update. Non-finite gradients abort before anything changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    fn scalar_store(value: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.add_filled("x", 1, 1, value);
        s
    }

    fn grads_of(store: &ParamStore, g: f64) -> Grads {
        // d/dx (g * x) = g
        let mut graph = Graph::new(store);
        let x = graph.param(store.id("x").unwrap());
        let loss = graph.scale(x, g);
        graph.backward(loss)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, AdamConfig { lr: 0.1, ..Default::default() });
        let grads = grads_of(&store, 1.0);
        adam.step(&mut store, &grads).unwrap();
        let x = store.get(store.id("x").unwrap()).item();
        assert!((x + 0.1).abs() < 1e-8, "{x}");
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut store = scalar_store(2.0);
        let mut adam = Adam::new(&store, AdamConfig { lr: 0.1, ..Default::default() });
        let g = grads_of(&store, 1.0);
        adam.step(&mut store, &g).unwrap();
        let before = store.clone();
        let m1 = adam.first_moment(0).item();
        let mut zero = Grads::zeros_like(&store);
        zero.accumulate(store.id("x").unwrap(), &Mat::scalar(0.0));
        let x_before = before.get(before.id("x").unwrap()).item();
        adam.step(&mut store, &zero).unwrap();
        assert!(adam.first_moment(0).item().abs() < m1.abs());
        // m is still non-zero, so the parameter keeps moving on momentum alone;
        // on a fresh optimizer a zero gradient is an exact no-op.
        let mut fresh = Adam::new(&before, AdamConfig::default());
        let mut copy = before.clone();
        let z = Grads::zeros_like(&copy);
        fresh.step(&mut copy, &z).unwrap();
        assert_eq!(copy.get(copy.id("x").unwrap()).item(), x_before);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = scalar_store(3.0);
        let mut adam = Adam::new(&store, AdamConfig { lr: 0.0, ..Default::default() });
        for _ in 0..4 {
            let g = grads_of(&store, 0.7);
            adam.step(&mut store, &g).unwrap();
        }
        assert_eq!(store.get(store.id("x").unwrap()).item(), 3.0);
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_reference() {
        // minimise (x - 3)^2 from x = 0
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, cfg);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let id = store.id("x").unwrap();
            let mut graph = Graph::new(&store);
            let p = graph.param(id);
            let target = graph.constant(Mat::scalar(3.0));
            let loss = graph.mse(p, target).unwrap();
            let grads = graph.backward(loss);
            drop(graph);
            adam.step(&mut store, &grads).unwrap();

            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((store.get(id).item() - x).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = grads_of(&store, f64::NAN);
        let err = adam.step(&mut store, &g).unwrap_err();
        assert!(err.to_string().contains("\"x\""));
        assert_eq!(store.get(store.id("x").unwrap()).item(), 1.0);
    }
}
