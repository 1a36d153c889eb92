use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::OptimizerState;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Probability of feeding the ground-truth frame at iteration `i`:
/// `k / (k + exp(i / k))`.
///
/// # Panics
/// If `k` is not positive.
pub fn scheduled_sampling_prob(iteration: u64, k: f64) -> f64 {
    assert!(k > 0.0, "decay constant must be positive, got {k}");
    k / (k + (iteration as f64 / k).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; no clipping when absent.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm<T: Real>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from gradients keyed by parameter; returns the pre-clip norm.
    pub fn update(&mut self, store: &mut ParamStore<T>, mut grads: Vec<(ParamId, Tensor<T>)>) -> f64 {
        let norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let step_size = T::of(c.lr * bc2.sqrt() / bc1);
        let eps_hat = eps * T::of(bc2.sqrt());
        for (id, g) in grads {
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                p[k] = p[k] - step_size * m[k] / (v[k].sqrt() + eps_hat);
            }
        }
        norm
    }

    pub fn export(&self, store: &ParamStore<T>) -> OptimizerState {
        let named = |ts: &[Tensor<T>]| -> BTreeMap<String, Tensor<f32>> {
            store
                .ids()
                .map(|id| (store.name(id).to_string(), ts[id.index()].cast()))
                .collect()
        };
        OptimizerState {
            step: self.step,
            first: named(&self.first),
            second: named(&self.second),
        }
    }

    pub fn import(config: AdamConfig, store: &ParamStore<T>, state: &OptimizerState) -> Result<Self> {
        let mut adam = Self::new(config, store);
        adam.step = state.step;
        for id in store.ids() {
            let name = store.name(id);
            for (dst, src) in [(&mut adam.first, &state.first), (&mut adam.second, &state.second)] {
                let t = src
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {name}")))?;
                t.expect_shape(store.get(id).shape())
                    .map_err(|e| Error::Checkpoint(format!("optimizer state for {name}: {e}")))?;
                dst[id.index()] = t.cast();
            }
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_endpoints_and_monotonicity() {
        assert_eq!(scheduled_sampling_prob(0, 100.0), 100.0 / 101.0);
        let mut last = f64::INFINITY;
        for i in 0..=1000 {
            let e = scheduled_sampling_prob(i, 100.0);
            assert!(e < last);
            last = e;
        }
        assert!(scheduled_sampling_prob(u64::MAX, 3000.0) == 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut store = ParamStore::<f32>::default();
        let id = store.insert("w", Tensor::full(&[3], 0.7));
        let before = store.clone();
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        for _ in 0..5 {
            adam.update(&mut store, vec![(id, Tensor::full(&[3], 2.5))]);
        }
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::default();
        let id = store.insert("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                clip_norm: None,
                ..AdamConfig::default()
            },
            &store,
        );
        adam.update(&mut store, vec![(id, Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap())]);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::<f64>::default();
        let a = store.insert("a", Tensor::zeros(&[2]));
        let b = store.insert("b", Tensor::zeros(&[1]));
        let mut grads = vec![
            (a, Tensor::<f64>::from_f64(&[2], &[30.0, 0.0]).unwrap()),
            (b, Tensor::from_f64(&[1], &[40.0]).unwrap()),
        ];
        assert_eq!(clip_global_norm(&mut grads, 10.0), 50.0);
        assert!((grads[0].1.data()[0] - 6.0).abs() < 1e-12);
        assert!((grads[1].1.data()[0] - 8.0).abs() < 1e-12);
    }
}
