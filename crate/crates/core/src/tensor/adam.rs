use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.0005, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction over a fixed subset of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, ids: Vec<ParamId>, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.value(id).numel()]).collect();
        let v = m.clone();
        Adam { config, t: 0, ids, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores moment buffers and the step counter, checking buffer sizes.
    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let fits = |bufs: &[Vec<f64>]| bufs.len() == self.m.len() && bufs.iter().zip(&self.m).all(|(a, b)| a.len() == b.len());
        if !fits(&m) || !fits(&v) {
            return Err(Error::invalid("optimizer state does not match its parameters"));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update from the gradients held in `store`.
    ///
    /// Gradients are validated before any parameter changes, so a non-finite
    /// gradient leaves both the store and the optimizer untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.ids {
            if store.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient for parameter {}", store.name(id))));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let grad = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let value = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn quad_store(x: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x));
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let (mut store, id) = quad_store(1.25);
        let mut adam = Adam::new(AdamConfig::default(), vec![id], &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(id).item(), 1.25);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // t=1: m̂ = g, v̂ = g², so the update is lr·g/(|g|+ε).
        for g in [3.0, -0.02] {
            let (mut store, id) = quad_store(0.0);
            store.add_grad(id, &[g]);
            let cfg = AdamConfig { epsilon: 0.0, ..AdamConfig::default() };
            let mut adam = Adam::new(cfg, vec![id], &store);
            adam.step(&mut store).unwrap();
            assert!((store.value(id).item() + cfg.lr * f64::signum(g)).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_reduce_convex_quadratic() {
        let (mut store, id) = quad_store(2.0);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, vec![id], &store);
        let loss = |s: &ParamStore| (s.value(id).item() - 0.5).powi(2);
        let start = loss(&store);
        for _ in 0..2 {
            store.zero_grad();
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let c = g.affine(x, 1.0, -0.5);
            let sq = g.mul(c, c).unwrap();
            g.backward(sq).unwrap();
            store.accumulate(&g);
            adam.step(&mut store).unwrap();
        }
        assert!(loss(&store) < start);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut store, id) = quad_store(0.0);
        store.add_grad(id, &[f64::NAN]);
        let mut adam = Adam::new(AdamConfig::default(), vec![id], &store);
        let err = adam.step(&mut store).unwrap_err().to_string();
        assert!(err.contains("parameter x"), "{err}");
        assert_eq!(adam.step_count(), 0);
    }
}
