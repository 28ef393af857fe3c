//! Finite-difference gradient oracle.
//!
//! Central differences over a seeded sample of parameter entries, compared
//! against analytic gradients supplied by the caller. Requires 64-bit mode
//! and a deterministic loss function.

use crate::error::{HigdaError, Result};
use crate::numerics::state::{Grads, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub eps: f64,
    /// Entries sampled per parameter tensor (all entries if smaller).
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { eps: 1e-5, samples_per_param: 8, seed: 0x5eed }
    }
}

/// Max relative error `|analytic - central difference| / max(1, |central difference|)`
/// over the sampled entries.
pub fn finite_diff_check<F>(
    state: &mut ModelState,
    analytic: &Grads,
    mut loss: F,
    cfg: &FdConfig,
) -> Result<f64>
where
    F: FnMut(&ModelState) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&cfg.eps) {
        return Err(HigdaError::Contract(format!("eps {} outside [1e-7, 1e-4]", cfg.eps)));
    }
    let base_a = loss(state)?;
    let base_b = loss(state)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(HigdaError::Oracle(format!(
            "loss function is not deterministic: {base_a} vs {base_b}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel = 0.0f64;
    for id in 0..state.len() {
        let n = state.param(id).value.len();
        let indices: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            (0..cfg.samples_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for i in indices {
            let orig = state.param(id).value.data()[i];
            state.param_mut(id).value.data_mut()[i] = orig + cfg.eps;
            let plus = loss(state)?;
            state.param_mut(id).value.data_mut()[i] = orig - cfg.eps;
            let minus = loss(state)?;
            state.param_mut(id).value.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.get(id).map(|g| g.data()[i]).unwrap_or(0.0);
            let rel = (a - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
