use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::params::{NamedGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are created lazily, zero-initialised,
/// the first time a parameter receives a gradient.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first_moment.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second_moment.get(name)
    }

    /// One update. Parameters without a gradient entry are left untouched.
    /// Nothing is modified if any gradient is non-finite or misshaped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &NamedGrads) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(name.clone()));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step_count as f64;
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        for (name, g) in grads {
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            *m = m.zip_map(g, "adam_step", |m, g| b1 * m + (1.0 - b1) * g)?;
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            *v = v.zip_map(g, "adam_step", |v, g| b2 * v + (1.0 - b2) * g * g)?;
            let update = m.zip_map(v, "adam_step", |m, v| {
                lr * (m / c1) / ((v / c2).sqrt() + eps)
            })?;
            let p = params.get_mut(name)?;
            *p = p.zip_map(&update, "adam_step", |p, u| p - u)?;
        }
        Ok(())
    }
}
