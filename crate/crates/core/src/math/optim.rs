use serde::{Deserialize, Serialize};

use crate::math::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` or non-positive disables it.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step_where(store, |_| true)
    }

    /// Updates only the parameters selected by `train`.
    pub fn step_where(&mut self, store: &mut ParamStore, train: impl Fn(ParamId) -> bool) {
        let ids: Vec<ParamId> = store.ids().filter(|&id| train(id)).collect();
        while self.m.len() < store.len() {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        let scale = match self.config.clip_norm {
            Some(c) if c > 0.0 => {
                let norm = ids
                    .iter()
                    .flat_map(|&id| store.get(id).grad.data())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            let n = p.value.numel();
            if self.m[i].len() != n {
                self.m[i] = vec![0.0; n];
                self.v[i] = vec![0.0; n];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data().to_vec();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j] * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0]));
        store.get_mut(id).grad = Tensor::vector(vec![0.3, -4.0]);
        let mut adam = Adam::new(AdamConfig {
            clip_norm: None,
            ..AdamConfig::default()
        });
        adam.step(&mut store);
        let w = store.value(id).data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![3.0]));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let w = store.value(id).item();
            store.get_mut(id).grad = Tensor::vector(vec![2.0 * (w - 1.0)]);
            adam.step(&mut store);
        }
        assert!((store.value(id).item() - 1.0).abs() < 1e-3);
    }
}
