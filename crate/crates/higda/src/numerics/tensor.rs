//! Dense row-major tensor, the universal value carrier.
//!
//! Values are stored as `f64`. Matrix products can optionally run through an
//! `f32` fast path (training mode); everything else stays in 64-bit.

use crate::error::{HigdaError, Result};
use serde::{Deserialize, Serialize};

/// Numeric precision for the heavy linear-algebra path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Full 64-bit arithmetic everywhere. Required by the gradient oracle.
    F64,
    /// Matrix products accumulate in 32-bit; elementwise ops stay 64-bit.
    #[default]
    F32,
}

/// Dense real array with shape metadata, row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(HigdaError::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Interpret as a matrix; errors unless the tensor is 2-D.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(HigdaError::Dim(format!("expected 2-D tensor, got shape {:?}", s))),
        }
    }

    /// Scalar value; errors unless the tensor has exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(HigdaError::Dim(format!("expected scalar, got shape {:?}", self.shape)))
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = (self.shape[0], self.shape[1]);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise in-place `self += c * other`. Shapes must match.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(HigdaError::Dim(format!(
                "axpy shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }
}

/// `out = a (m×k) · b (k×n)`, with optional transposes applied to the logical operands.
///
/// `ta`/`tb` flag that the stored tensor should be read transposed. The f32 mode
/// round-trips both operands through 32-bit buffers and accumulates with sgemm.
pub fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool, precision: Precision) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(HigdaError::Dim(format!(
            "matmul inner dims: {}x{}{} vs {}x{}{}",
            ar,
            ac,
            if ta { "^T" } else { "" },
            br,
            bc,
            if tb { "^T" } else { "" }
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    // Row-major strides; a transpose swaps them.
    let (rsa, csa) = if ta { (1isize, ac as isize) } else { (ac as isize, 1isize) };
    let (rsb, csb) = if tb { (1isize, bc as isize) } else { (bc as isize, 1isize) };
    match precision {
        Precision::F64 => unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Precision::F32 => {
            let a32: Vec<f32> = a.data.iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.data.iter().map(|&v| v as f32).collect();
            let mut o32 = vec![0.0f32; m * n];
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    rsa,
                    csa,
                    b32.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    o32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for (o, v) in out.data.iter_mut().zip(o32.iter()) {
                *o = *v as f64;
            }
        }
    }
    Ok(out)
}
