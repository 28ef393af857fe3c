//! Trainable parameter store, partitioned into the two groups the minimax
//! objective needs, plus the seeded run context all stochastic operations
//! draw from.

use crate::error::{HigdaError, Result};
use crate::numerics::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// Which half of the minimax objective a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Log,
    Gog,
}

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    /// SGD momentum buffer, same shape as `value`.
    pub momentum: Tensor,
}

/// All trainable parameters. Each parameter is registered exactly once.
#[derive(Debug, Clone, Default)]
pub struct ModelState {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(HigdaError::Contract(format!("parameter {name} registered twice")));
        }
        let id = self.params.len();
        let momentum = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.to_string(), group, value, momentum });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    /// Immutable value snapshot shared across forward tapes of one step.
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot { values: self.params.iter().map(|p| Arc::new(p.value.clone())).collect() }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Cheaply cloneable parameter values captured at the start of a step.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    pub(crate) values: Vec<Arc<Tensor>>,
}

impl ParamSnapshot {
    pub fn value(&self, id: ParamId) -> &Arc<Tensor> {
        &self.values[id]
    }
}

/// One gradient tensor per parameter, keyed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Grads {
    by_param: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(state: &ModelState) -> Self {
        Grads { by_param: vec![None; state.len()] }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        match &mut self.by_param[id] {
            Some(g) => g.axpy(1.0, grad)?,
            slot => *slot = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param[id].as_ref()
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        self.by_param[id] = Some(grad);
    }

    /// `self += c * other` over every present entry of `other`.
    pub fn axpy(&mut self, c: f64, other: &Grads) -> Result<()> {
        for (id, g) in other.by_param.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.by_param[id] {
                    Some(mine) => mine.axpy(c, g)?,
                    slot => {
                        let mut scaled = g.clone();
                        scaled.scale_in_place(c);
                        *slot = Some(scaled);
                    }
                }
            }
        }
        Ok(())
    }

    /// Replace missing entries with zero tensors so every parameter is covered.
    pub fn fill_missing_with_zeros(&mut self, state: &ModelState) {
        for (id, slot) in self.by_param.iter_mut().enumerate() {
            if slot.is_none() {
                *slot = Some(Tensor::zeros(state.param(id).value.shape()));
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.by_param.iter().enumerate().map(|(i, g)| (i, g.as_ref()))
    }
}

/// Seeded generator context. Every stochastic operation in the training stack
/// draws from this single stream so runs are reproducible.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub rng: ChaCha8Rng,
}

impl RunContext {
    pub fn from_seed(seed: u64) -> Self {
        RunContext { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform init in `[-limit, limit]` with `limit = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier_uniform(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-limit..=limit))
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn uniform(&mut self, shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-scale..=scale))
    }

    /// Serializable RNG position for checkpointing.
    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            word_pos: format!("{}", self.rng.get_word_pos()),
        }
    }

    pub fn restore_rng(state: &RngState) -> Result<Self> {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| HigdaError::Checkpoint("bad rng word position".into()))?;
        rng.set_word_pos(pos);
        Ok(RunContext { rng })
    }
}

/// RNG seed plus stream position, stored in checkpoint manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: String,
}

/// A linear projection layer: `weight` is `out×in`, `bias` is `out`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineMap {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(HigdaError::Dim(format!(
                "bias shape {:?} inconsistent with weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(AffineMap { weight, bias })
    }
}

/// Registered weight/bias pair addressing an [`AffineMap`] inside [`ModelState`].
#[derive(Debug, Clone, Copy)]
pub struct AffineIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Register an affine map `in_dim -> out_dim` under `name.weight` / `name.bias`.
pub fn register_affine(
    state: &mut ModelState,
    ctx: &mut RunContext,
    name: &str,
    group: ParamGroup,
    in_dim: usize,
    out_dim: usize,
) -> Result<AffineIds> {
    let w = ctx.xavier_uniform(&[out_dim, in_dim], in_dim, out_dim);
    let b = Tensor::zeros(&[out_dim]);
    Ok(AffineIds {
        w: state.register(&format!("{name}.weight"), group, w)?,
        b: state.register(&format!("{name}.bias"), group, b)?,
    })
}
