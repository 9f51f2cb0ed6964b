//! Adam with decoupled weight decay and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// First and second moment buffers aligned with a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Tensors without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id).as_mut_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for j in 0..p.len() {
                let gj = g.as_slice()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * c.weight_decay * p[j];
                p[j] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Learning rate for 1-based `epoch` of `total`: `base` times `factor` for
/// every boundary `ceil(point * total)` already passed.
pub fn step_decay_lr(base: f64, epoch: usize, total: usize, points: &[f64], factor: f64) -> f64 {
    let passed = points
        .iter()
        .filter(|&&p| epoch > (p * total as f64).ceil() as usize)
        .count();
    base * factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    #[test]
    fn decay_boundaries() {
        let lr = |e| step_decay_lr(1e-3, e, 100, &[0.75, 0.9], 0.1);
        assert_eq!(lr(1), 1e-3);
        assert_eq!(lr(75), 1e-3);
        assert!((lr(76) - 1e-4).abs() < 1e-18);
        assert!((lr(90) - 1e-4).abs() < 1e-18);
        assert!((lr(91) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Matrix::filled(1, 2, 1.0));
        let mut opt = AdamW::new(
            &store,
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        let mut g = Grads::for_store(&store);
        g.accumulate(id, &Matrix::from_vec(1, 2, vec![3.0, -0.5]).unwrap());
        opt.update(&mut store, &g, 0.1);
        let p = store.get(ParamId(0));
        assert!((p.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((p.get(0, 1) - 1.1).abs() < 1e-7);
    }
}
