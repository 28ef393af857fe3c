//! SGD with momentum and decoupled-free weight decay (decay folded into the
//! gradient, classic form).

use crate::error::{HigdaError, Result};
use crate::numerics::state::{Grads, ModelState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 1e-3, weight_decay: 5e-5, momentum: 0.9 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(HigdaError::Config("learning_rate must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(HigdaError::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HigdaError::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One optimizer step over every registered parameter:
/// `b <- momentum*b + g + wd*p`, then `p <- p - lr*b`.
///
/// Every parameter must have a gradient; a missing one is a contract error.
/// Accepts `learning_rate == 0` (a no-op update with loss still computed);
/// config validation upstream requires a strictly positive rate.
pub fn sgd_step(state: &mut ModelState, grads: &Grads, cfg: &SgdConfig) -> Result<()> {
    if !cfg.learning_rate.is_finite() || cfg.learning_rate < 0.0 {
        return Err(HigdaError::Config("learning_rate must be finite and >= 0".into()));
    }
    if cfg.weight_decay < 0.0 || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(HigdaError::Config("invalid weight_decay or momentum".into()));
    }
    for id in 0..state.len() {
        if grads.get(id).is_none() {
            return Err(HigdaError::Contract(format!(
                "missing gradient for parameter {}",
                state.param(id).name
            )));
        }
    }
    for id in 0..state.len() {
        let g = grads.get(id).unwrap();
        let p = state.param_mut(id);
        if g.shape() != p.value.shape() {
            return Err(HigdaError::Dim(format!(
                "gradient shape {:?} vs parameter {:?} for {}",
                g.shape(),
                p.value.shape(),
                p.name
            )));
        }
        let (lr, wd, mu) = (cfg.learning_rate, cfg.weight_decay, cfg.momentum);
        let crate::numerics::state::Param { value, momentum, name, .. } = p;
        for ((v, b), &gi) in
            value.data_mut().iter_mut().zip(momentum.data_mut().iter_mut()).zip(g.data().iter())
        {
            *b = mu * *b + gi + wd * *v;
            *v -= lr * *b;
            if !v.is_finite() {
                return Err(HigdaError::Numerical(format!(
                    "non-finite parameter after update in {name}"
                )));
            }
        }
    }
    Ok(())
}
