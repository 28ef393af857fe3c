//! Minimal differentiable-computation substrate: dense tensors, a tape over
//! the fixed primitive set the networks need, SGD, and the finite-difference
//! gradient oracle used by every other module's tests.

pub mod gradcheck;
pub mod io;
pub mod sgd;
pub mod state;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, FdConfig};
pub use sgd::{sgd_step, SgdConfig};
pub use state::{
    register_affine, AffineIds, AffineMap, Grads, ModelState, Param, ParamGroup, ParamId,
    ParamSnapshot, RngState, RunContext,
};
pub use tape::{Activation, Tape, TapeGrads, Var};
pub use tensor::{matmul, Precision, Tensor};

use crate::error::Result;

/// Stand-alone affine application `weight·x + bias` for a single vector.
/// Gradients for x, weight, and bias come from the tape path.
pub fn affine_forward(x: &Tensor, m: &AffineMap) -> Result<Tensor> {
    let mut tape = Tape::new(Precision::F64);
    let (out, in_dim) = m.weight.dims2()?;
    let xv = tape.leaf(Tensor::from_vec(&[1, in_dim], x.data().to_vec())?);
    let w = tape.leaf(m.weight.clone());
    let b = tape.leaf(m.bias.clone());
    let y = tape.affine(xv, w, b)?;
    Tensor::from_vec(&[out], tape.value(y).data().to_vec())
}
