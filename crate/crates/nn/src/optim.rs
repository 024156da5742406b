use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamId, ParamStore};
use crate::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the update when the global gradient norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Adam over an explicit list of parameters. Parameters outside the list are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    first: Vec<Mat>,
    second: Vec<Mat>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, params: &[ParamId]) -> Self {
        let first = params
            .iter()
            .map(|id| Mat::zeros(store.get(*id).dim()))
            .collect::<Vec<_>>();
        Self {
            config,
            params: params.to_vec(),
            second: first.clone(),
            first,
            steps: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            clip_norm,
        } = self.config;
        let scale = match clip_norm {
            Some(max) => {
                let norm = grads.global_norm(&self.params);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bias1 = 1.0 - beta1.powi(self.steps as i32);
        let bias2 = 1.0 - beta2.powi(self.steps as i32);
        for (k, id) in self.params.iter().enumerate() {
            let Some(g) = grads.get(*id) else { continue };
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, g| {
                let g = g * scale;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            });
            if lr == 0.0 {
                continue;
            }
            Zip::from(store.get_mut(*id))
                .and(&*m)
                .and(&*v)
                .for_each(|p, m, v| {
                    *p -= lr * (m / bias1) / ((v / bias2).sqrt() + eps);
                });
        }
    }
}
