//! Adam with a stepwise exponential learning-rate decay.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{LocaError, Result};

use super::tape::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_rate: 0.99,
            decay_every: 100,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.decay_rate > 0.0
            && self.decay_rate <= 1.0
            && self.decay_every > 0;
        if ok {
            Ok(())
        } else {
            Err(LocaError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// `base_lr * decay_rate^(floor(step / decay_every))`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let exponent = step / self.decay_every as u64;
        self.base_lr * self.decay_rate.powi(exponent.min(i32::MAX as u64) as i32)
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Matrix::zeros(p.dim()), Matrix::zeros(p.dim())))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.learning_rate(self.step)
    }

    /// One bias-corrected update with the learning rate of the current step.
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(LocaError::shape(
                "adam",
                format!(
                    "{} tracked tensors, {} params, {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (idx, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != self.m[idx].dim() || g.dim() != self.m[idx].dim() {
                return Err(LocaError::shape(
                    format!("adam tensor {idx}"),
                    format!(
                        "state {:?}, param {:?}, grad {:?}",
                        self.m[idx].dim(),
                        p.dim(),
                        g.dim()
                    ),
                ));
            }
        }
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                });
        }
        self.step += 1;
        Ok(())
    }
}
