//! AdamW with decoupled weight decay, kept in-repo so the training loop
//! has no external numeric dependencies.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Param};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 5e-2,
        }
    }
}

struct Moments<E: Scalar> {
    m: Tensor<E>,
    v: Tensor<E>,
}

/// Optimizer state keyed by parameter name.
pub struct AdamW<E: Scalar> {
    pub cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<E>>,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter that received a
    /// gradient. Decoupled decay: w -= lr * (m_hat / (sqrt(v_hat) + eps)
    /// + wd * w).
    pub fn step(&mut self, params: &mut [&mut Param<E>], grads: &Gradients<E>) {
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = E::from_f64(self.cfg.lr);
        let wd = E::from_f64(self.cfg.weight_decay);
        let eps = E::from_f64(self.cfg.eps);
        let b1e = E::from_f64(b1);
        let b2e = E::from_f64(b2);
        let ib1 = E::from_f64(1.0 - b1);
        let ib2 = E::from_f64(1.0 - b2);
        let ibc1 = E::from_f64(1.0 / bc1);
        let ibc2 = E::from_f64(1.0 / bc2);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.param(&p.name) else {
                continue;
            };
            let entry = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let m = entry.m.data_mut();
            let v = entry.v.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1e * m[i] + ib1 * gi;
                v[i] = b2e * v[i] + ib2 * gi * gi;
                let m_hat = m[i] * ibc1;
                let v_hat = v[i] * ibc2;
                w[i] = w[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]);
            }
        }
    }
}
