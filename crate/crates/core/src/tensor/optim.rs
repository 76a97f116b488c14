use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{GhnError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
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

impl AdamConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    /// One bias-corrected Adam update of every parameter in `params`.
    ///
    /// All gradients are checked for finiteness before anything is mutated.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        cfg: AdamConfig,
    ) -> Result<()> {
        for (name, t) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| GhnError::input(format!("missing gradient for `{name}`")))?;
            if g.len() != t.len() {
                return Err(GhnError::dim(format!(
                    "gradient for `{name}` has {} elements, parameter has {}",
                    g.len(),
                    t.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GhnError::Optimizer {
                    param: name.to_string(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
        for name in names {
            let g = &grads[&name];
            let shape = params.get(&name).unwrap().shape().to_vec();
            if self.m.get(&name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(&shape));
                self.v.insert(name.clone(), Tensor::zeros(&shape));
            }
            let m = self.m.get_mut(&name).unwrap().data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = self.v.get_mut(&name).unwrap().data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let m = self.m.get(&name).unwrap().data();
            let v = self.v.get(&name).unwrap().data();
            let p = params.get_mut(&name).unwrap().data_mut();
            for k in 0..p.len() {
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
