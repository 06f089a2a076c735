use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let zeros = |id: &ParamId| vec![0.0; store.value(*id).len()];
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restore state from a checkpoint; shapes must match the current set.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let congruent = |a: &[Vec<f64>]| {
            a.len() == self.m.len() && a.iter().zip(&self.m).all(|(x, y)| x.len() == y.len())
        };
        if !congruent(&m) || !congruent(&v) {
            return Err(Error::Format(
                "optimizer state does not match parameters".into(),
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update from the stored gradients, then clear them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for id in &self.params {
            if store.get(*id).grad.is_none() {
                return Err(Error::MissingGrad(store.get(*id).name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, id) in self.params.iter().enumerate() {
            let p = store.get_mut(*id);
            let grad = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
