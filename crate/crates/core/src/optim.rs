//! Adam with coupled (L2-in-gradient) weight decay.

use crate::error::{Error, Result};
use crate::tensor::ModuleParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step counter; one moment buffer per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModuleParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn matches(&self, params: &ModuleParams) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .tensors()
                .iter()
                .zip(&self.m)
                .all(|(t, m)| t.numel() == m.len())
    }
}

/// One Adam update using the `grad` field of every parameter.
///
/// Fails without touching any parameter if a gradient is missing or not
/// finite.
pub fn sgd_adam_step(
    params: &mut ModuleParams,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<()> {
    if !state.matches(params) {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    for (name, t) in params.iter() {
        match &t.grad {
            None => {
                return Err(Error::Invalid(format!("missing gradient for `{name}`")));
            }
            Some(g) => {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of `{name}`[{i}] = {}",
                        g[i]
                    )));
                }
            }
        }
    }
    state.step += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.step as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.step as i32);
    for ((t, m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let g = t.grad.take().unwrap_or_default();
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            let gi = g[i] + cfg.weight_decay * *x;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / b1t;
            let vhat = v[i] / b2t;
            *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
