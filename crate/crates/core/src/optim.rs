//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm bound on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update and returns the pre-clipping gradient norm. Frozen
    /// parameters are skipped entirely, including weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> f64 {
        let norm = grads
            .iter()
            .filter(|(id, _)| !store.is_frozen(*id))
            .flat_map(|(_, g)| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.get_mut(*id).data_mut();
            for i in 0..w.len() {
                let gi = g[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            clip_norm: None,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[(a, vec![0.5, -2.0])]);
        let w = store.get(a).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::full(&[3], 0.3));
        store.set_frozen(a, true);
        let before = store.get(a).clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[(a, vec![1.0; 3])]);
        assert_eq!(store.get(a).data(), before.data());
    }

    #[test]
    fn clipping_bounds_effective_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::zeros(&[1]));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let norm = opt.step(&mut store, &[(a, vec![10.0])]);
        assert_eq!(norm, 10.0);
    }
}
