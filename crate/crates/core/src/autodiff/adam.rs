use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{GradMap, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over a fixed set of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    params: Vec<ParamId>,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let moments = params
            .iter()
            .map(|&id| {
                let n = store.value(id).numel();
                (id, (vec![0.0; n], vec![0.0; n]))
            })
            .collect();
        AdamState {
            config,
            step: 0,
            params,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update. Parameters absent from `grads` see a zero
    /// gradient. A NaN or infinite gradient refuses the whole step and
    /// leaves every parameter and moment untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        for &id in &self.params {
            if let Some(g) = grads.get(&id) {
                if g.shape() != store.value(id).shape() {
                    return Err(Error::shape("adam_step", g.shape(), store.value(id).shape()));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter '{}'",
                        store.name(id)
                    )));
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for &id in &self.params {
            let (m, v) = self.moments.get_mut(&id).expect("moments registered");
            let grad = grads.get(&id).map(|g| g.data());
            let value = store.value_mut(id).data_mut();
            for i in 0..value.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![0.3, -1.7, 2.5]));
        let before = store.value(p).clone();
        let mut adam = AdamState::new(AdamConfig::default(), vec![p], &store);
        let mut grads = GradMap::new();
        grads.insert(p, Tensor::zeros(&[3]));
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(adam.step_count(), 1);
        assert_eq!(
            store.value(p).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g|+eps)
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.0));
        let mut adam = AdamState::new(AdamConfig::default(), vec![p], &store);
        let grads = GradMap::from([(p, Tensor::scalar(1.0))]);
        adam.step(&mut store, &grads).unwrap();
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((store.value(p).item().unwrap() - expected).abs() < 1e-15);
        assert!((store.value(p).item().unwrap() - 0.999).abs() < 1e-10);
    }

    #[test]
    fn nan_gradient_refused_with_name() {
        let mut store = ParamStore::new();
        let p = store.add("encoder.weight", Tensor::scalar(1.0));
        let mut adam = AdamState::new(AdamConfig::default(), vec![p], &store);
        let grads = GradMap::from([(p, Tensor::scalar(f64::NAN))]);
        let err = adam.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("encoder.weight"));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(store.value(p).item().unwrap(), 1.0);
    }

    #[test]
    fn identical_gradient_steps_descend_a_quadratic() {
        // f(p) = (p - 3)², gradient frozen at p0 for both steps
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(0.0));
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = AdamState::new(cfg, vec![p], &store);
        let f = |x: f64| (x - 3.0) * (x - 3.0);
        let g = GradMap::from([(p, Tensor::scalar(2.0 * (0.0 - 3.0)))]);
        let l0 = f(store.value(p).item().unwrap());
        adam.step(&mut store, &g).unwrap();
        let l1 = f(store.value(p).item().unwrap());
        adam.step(&mut store, &g).unwrap();
        let l2 = f(store.value(p).item().unwrap());
        assert!(l1 < l0 && l2 < l1, "{l0} {l1} {l2}");
    }
}
