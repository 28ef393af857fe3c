//! Reverse-mode differentiation over the fixed set of primitives the HiGDA
//! stack needs. Not a general autodiff engine: every op is enumerated here
//! with a hand-written vector-Jacobian product.
//!
//! A [`Tape`] records the forward computation; [`Tape::backward`] replays it
//! in reverse, accumulating gradients per recorded variable. Parameters enter
//! as leaves via [`Tape::param`] so their gradients can be exported into a
//! [`Grads`] keyed by `ParamId`.

use crate::error::{HigdaError, Result};
use crate::numerics::state::{Grads, ParamId, ParamSnapshot};
use crate::numerics::tensor::{matmul, Precision, Tensor};
use std::sync::Arc;

/// Nonlinearity used throughout the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let phi = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                phi + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_FLOOR: f64 = 1e-12;
const BCE_CLAMP: f64 = 1e-7;
const LAYER_NORM_EPS: f64 = 1e-6;

enum Op {
    Leaf { param: Option<ParamId> },
    /// y[N×out] = x[N×in] · w[out×in]^T + b
    Affine { x: Var, w: Var, b: Var },
    /// Per-row standardization over features with learnable scale/shift.
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Activate { x: Var, kind: Activation },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    /// [N×D1], [N×D2] -> [N×(D1+D2)]
    ConcatCols { a: Var, b: Var },
    /// m_ic = u_ic - min_{j in N(i)} u_jc (i.e. max over neighbors of u_i - u_j).
    MaxRelative { u: Var, argmin: Vec<usize> },
    /// Channelwise max over rows: [N×D] -> [1×D].
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    /// Merge each 2×2 grid cell of nodes into one concatenated node.
    Merge2x2 { x: Var, grid: (usize, usize) },
    /// Row p = i*N+j holds |x_i - x_j| elementwise: [N×D] -> [N²×D].
    PairwiseAbsDiff { x: Var },
    /// Row p = i*N+j holds the Euclidean distance: [N×D] -> [N²×1].
    PairwiseL2 { x: Var },
    /// [N²×1] -> [N×N], data order preserved.
    ReshapeSquare { x: Var },
    /// A = D^{-1/2}(Ahat + I)D^{-1/2}; `row_sums` caches the degree of Ahat+I.
    NormalizeAffinity { ahat: Var, row_sums: Vec<f64> },
    /// [N×N] · [N×D]
    MatMul { a: Var, b: Var },
    SoftmaxRows { x: Var },
    /// Mean of -log p[y] over rows.
    NllRows { p: Var, labels: Arc<Vec<usize>> },
    /// Mean BCE over masked pairs of an [N×N] score matrix.
    BcePairs { ahat: Var, gt: Arc<Vec<f64>>, mask: Arc<Vec<bool>>, count: usize },
    /// Mean Shannon entropy of probability rows.
    MeanEntropy { p: Var },
    PickElement { x: Var, index: usize },
    SumSquares { x: Var },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Per-variable gradients produced by a backward pass.
pub struct TapeGrads {
    grads: Vec<Option<Tensor>>,
}

impl TapeGrads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite tape value");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None })
    }

    pub fn param(&mut self, snap: &ParamSnapshot, id: ParamId) -> Var {
        self.push_arc(Arc::clone(snap.value(id)), Op::Leaf { param: Some(id) })
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, xin) = self.value(x).dims2()?;
        let (out, win) = self.value(w).dims2()?;
        if xin != win || self.value(b).shape() != [out] {
            return Err(HigdaError::Dim(format!(
                "affine: x[{}x{}], w[{}x{}], b{:?}",
                n,
                xin,
                out,
                win,
                self.value(b).shape()
            )));
        }
        let mut y = matmul(self.value(x), false, self.value(w), true, self.precision)?;
        let bias = self.value(b).data().to_vec();
        for r in 0..n {
            let row = &mut y.data_mut()[r * out..(r + 1) * out];
            for (v, bv) in row.iter_mut().zip(bias.iter()) {
                *v += bv;
            }
        }
        Ok(self.push(y, Op::Affine { x, w, b }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(HigdaError::Dim("layer_norm scale/shift shape".into()));
        }
        let mut out = Tensor::zeros(&[n, d]);
        let mut mean = vec![0.0; n];
        let mut inv_std = vec![0.0; n];
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        for r in 0..n {
            let row = self.value(x).row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            mean[r] = m;
            inv_std[r] = is;
            for c in 0..d {
                out.data_mut()[r * d + c] = g[c] * (row[c] - m) * is + be[c];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean, inv_std }))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Activate { x, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(HigdaError::Dim(format!(
                "add shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.axpy(1.0, self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.push(out, Op::Scale { x, c })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, da) = self.value(a).dims2()?;
        let (nb, db) = self.value(b).dims2()?;
        if na != nb {
            return Err(HigdaError::Dim("concat_cols row mismatch".into()));
        }
        let mut out = Tensor::zeros(&[na, da + db]);
        for r in 0..na {
            out.data_mut()[r * (da + db)..r * (da + db) + da].copy_from_slice(self.value(a).row(r));
            out.data_mut()[r * (da + db) + da..(r + 1) * (da + db)]
                .copy_from_slice(self.value(b).row(r));
        }
        Ok(self.push(out, Op::ConcatCols { a, b }))
    }

    /// Max-relative message: per node and channel, `max_j (u_i - u_j)` over
    /// the node's neighbor list. Empty neighbor lists are a graph error.
    pub fn max_relative(&mut self, u: Var, edges: &[Vec<usize>]) -> Result<Var> {
        let (n, d) = self.value(u).dims2()?;
        if edges.len() != n {
            return Err(HigdaError::Graph(format!("{} nodes but {} edge lists", n, edges.len())));
        }
        let mut out = Tensor::zeros(&[n, d]);
        let mut argmin = vec![0usize; n * d];
        for (i, nbrs) in edges.iter().enumerate() {
            if nbrs.is_empty() {
                return Err(HigdaError::Graph(format!("node {i} has no neighbors")));
            }
            let ui = self.value(u).row(i).to_vec();
            for c in 0..d {
                let mut best = f64::INFINITY;
                let mut best_j = nbrs[0];
                for &j in nbrs {
                    let v = self.value(u).data()[j * d + c];
                    if v < best {
                        best = v;
                        best_j = j;
                    }
                }
                out.data_mut()[i * d + c] = ui[c] - best;
                argmin[i * d + c] = best_j;
            }
        }
        Ok(self.push(out, Op::MaxRelative { u, argmin }))
    }

    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if n == 0 {
            return Err(HigdaError::Dim("max_pool_rows over zero rows".into()));
        }
        let mut out = Tensor::zeros(&[1, d]);
        let mut argmax = vec![0usize; d];
        for c in 0..d {
            let mut best = f64::NEG_INFINITY;
            for r in 0..n {
                let v = self.value(x).data()[r * d + c];
                if v > best {
                    best = v;
                    argmax[c] = r;
                }
            }
            out.data_mut()[c] = best;
        }
        Ok(self.push(out, Op::MaxPoolRows { x, argmax }))
    }

    /// Concatenate each 2×2 cell of the node grid into a single node:
    /// [R·C × D] -> [(R/2)·(C/2) × 4D]. Rows are in row-major grid order.
    pub fn merge_2x2(&mut self, x: Var, grid: (usize, usize)) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (rows, cols) = grid;
        if rows * cols != n || rows % 2 != 0 || cols % 2 != 0 {
            return Err(HigdaError::Graph(format!(
                "merge_2x2 needs an even {}x{} grid matching {} nodes",
                rows, cols, n
            )));
        }
        let (r2, c2) = (rows / 2, cols / 2);
        let mut out = Tensor::zeros(&[r2 * c2, 4 * d]);
        for r in 0..r2 {
            for c in 0..c2 {
                let dst = (r * c2 + c) * 4 * d;
                for (q, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let src = ((2 * r + dr) * cols + (2 * c + dc)) * d;
                    out.data_mut()[dst + q * d..dst + (q + 1) * d]
                        .copy_from_slice(&self.value(x).data()[src..src + d]);
                }
            }
        }
        Ok(self.push(out, Op::Merge2x2 { x, grid }))
    }

    pub fn pairwise_abs_diff(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let mut out = Tensor::zeros(&[n * n, d]);
        for i in 0..n {
            for j in 0..n {
                let p = (i * n + j) * d;
                for c in 0..d {
                    out.data_mut()[p + c] =
                        (self.value(x).data()[i * d + c] - self.value(x).data()[j * d + c]).abs();
                }
            }
        }
        Ok(self.push(out, Op::PairwiseAbsDiff { x }))
    }

    pub fn pairwise_l2(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let mut out = Tensor::zeros(&[n * n, 1]);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..d {
                    let diff =
                        self.value(x).data()[i * d + c] - self.value(x).data()[j * d + c];
                    s += diff * diff;
                }
                out.data_mut()[i * n + j] = s.sqrt();
            }
        }
        Ok(self.push(out, Op::PairwiseL2 { x }))
    }

    pub fn reshape_square(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if cols != 1 {
            return Err(HigdaError::Dim("reshape_square expects a column".into()));
        }
        let n = (rows as f64).sqrt().round() as usize;
        if n * n != rows {
            return Err(HigdaError::Dim(format!("{rows} rows is not a perfect square")));
        }
        let out = Tensor::from_vec(&[n, n], self.value(x).data().to_vec())?;
        Ok(self.push(out, Op::ReshapeSquare { x }))
    }

    /// Symmetric normalization with self-connections. Input must be square,
    /// symmetric (tolerance 1e-12) and non-negative.
    pub fn normalize_affinity(&mut self, ahat: Var) -> Result<Var> {
        let (n, m) = self.value(ahat).dims2()?;
        if n != m {
            return Err(HigdaError::Dim("normalize_affinity expects square input".into()));
        }
        let a = self.value(ahat);
        for i in 0..n {
            for j in 0..i {
                if (a.data()[i * n + j] - a.data()[j * n + i]).abs() > 1e-12 {
                    return Err(HigdaError::Contract("affinity matrix not symmetric".into()));
                }
            }
            for j in 0..n {
                if a.data()[i * n + j] < 0.0 {
                    return Err(HigdaError::Contract("affinity entries must be >= 0".into()));
                }
            }
        }
        let mut row_sums = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += a.data()[i * n + j];
            }
            row_sums[i] = s + 1.0; // +I on the diagonal
        }
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let mij = a.data()[i * n + j] + if i == j { 1.0 } else { 0.0 };
                out.data_mut()[i * n + j] = mij / (row_sums[i] * row_sums[j]).sqrt();
            }
        }
        Ok(self.push(out, Op::NormalizeAffinity { ahat, row_sums }))
    }

    pub fn matmul_vars(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), false, self.value(b), false, self.precision)?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        let mut out = Tensor::zeros(&[n, c]);
        for r in 0..n {
            let row = self.value(x).row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out.data_mut()[r * c + k] = e;
                z += e;
            }
            for k in 0..c {
                out.data_mut()[r * c + k] /= z;
            }
        }
        Ok(self.push(out, Op::SoftmaxRows { x }))
    }

    /// Mean negative log-likelihood over rows; every row must carry a label.
    pub fn nll_rows(&mut self, p: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let (n, c) = self.value(p).dims2()?;
        if labels.len() != n {
            return Err(HigdaError::Contract(format!("{} rows but {} labels", n, labels.len())));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(HigdaError::Contract(format!("label {y} out of range {c}")));
            }
            total -= self.value(p).data()[r * c + y].max(LN_FLOOR).ln();
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(out, Op::NllRows { p, labels }))
    }

    /// Mean binary cross-entropy over the masked entries of a square score
    /// matrix; scores are clamped away from {0,1} before the log.
    pub fn bce_pairs(
        &mut self,
        ahat: Var,
        gt: Arc<Vec<f64>>,
        mask: Arc<Vec<bool>>,
    ) -> Result<Var> {
        let (n, m) = self.value(ahat).dims2()?;
        if gt.len() != n * m || mask.len() != n * m {
            return Err(HigdaError::Dim("bce_pairs target/mask size".into()));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            let out = Tensor::scalar(0.0);
            return Ok(self.push(out, Op::BcePairs { ahat, gt, mask, count }));
        }
        let mut total = 0.0;
        let mut clamped = 0usize;
        for idx in 0..n * m {
            if !mask[idx] {
                continue;
            }
            let raw = self.value(ahat).data()[idx];
            let a = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if a != raw {
                clamped += 1;
            }
            let e = gt[idx];
            total += -e * a.ln() - (1.0 - e) * (1.0 - a).ln();
        }
        if clamped > 0 {
            log::warn!("edge loss clamped {clamped} affinity value(s) away from {{0, 1}}");
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(out, Op::BcePairs { ahat, gt, mask, count }))
    }

    pub fn mean_entropy(&mut self, p: Var) -> Result<Var> {
        let (n, c) = self.value(p).dims2()?;
        let mut total = 0.0;
        for idx in 0..n * c {
            let v = self.value(p).data()[idx];
            if v > 0.0 {
                total -= v * v.ln();
            }
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(out, Op::MeanEntropy { p }))
    }

    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let index = row * c + col;
        if index >= self.value(x).len() {
            return Err(HigdaError::Dim("pick out of range".into()));
        }
        let out = Tensor::scalar(self.value(x).data()[index]);
        Ok(self.push(out, Op::PickElement { x, index }))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x })
    }

    /// Reverse pass from `root`, seeded with ones (scalar roots) or `seed`.
    pub fn backward(&self, root: Var, seed: Option<&Tensor>) -> Result<TapeGrads> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_grad = match seed {
            Some(s) => {
                if s.shape() != self.value(root).shape() {
                    return Err(HigdaError::Dim("backward seed shape mismatch".into()));
                }
                s.clone()
            }
            None => {
                if self.value(root).len() != 1 {
                    return Err(HigdaError::Contract(
                        "backward without seed requires a scalar root".into(),
                    ));
                }
                Tensor::from_vec(self.value(root).shape(), vec![1.0])?
            }
        };
        grads[root.0] = Some(root_grad);

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(TapeGrads { grads })
    }

    /// Export gradients of parameter leaves into `out`, accumulating.
    pub fn export_param_grads(&self, tg: &TapeGrads, out: &mut Grads) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = &tg.grads[idx] {
                    out.accumulate(pid, g)?;
                }
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
        match &mut grads[v.0] {
            Some(g) => g.axpy(1.0, &delta)?,
            slot => *slot = Some(delta),
        }
        Ok(())
    }

    fn apply_vjp(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Affine { x, w, b } => {
                let dx = matmul(g, false, self.value(*w), false, self.precision)?;
                let dw = matmul(g, true, self.value(*x), false, self.precision)?;
                let (n, out) = g.dims2()?;
                let mut db = Tensor::zeros(&[out]);
                for r in 0..n {
                    for c in 0..out {
                        db.data_mut()[c] += g.data()[r * out + c];
                    }
                }
                Self::accumulate(grads, *x, dx)?;
                Self::accumulate(grads, *w, dw)?;
                Self::accumulate(grads, *b, db)?;
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let (n, d) = self.value(*x).dims2()?;
                let gm = self.value(*gamma).data();
                let xv = self.value(*x).data();
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                for r in 0..n {
                    let (m, is) = (mean[r], inv_std[r]);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..d {
                        let xhat = (xv[r * d + c] - m) * is;
                        let dy = g.data()[r * d + c];
                        let dxhat = dy * gm[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma.data_mut()[c] += dy * xhat;
                        dbeta.data_mut()[c] += dy;
                    }
                    for c in 0..d {
                        let xhat = (xv[r * d + c] - m) * is;
                        let dxhat = g.data()[r * d + c] * gm[c];
                        dx.data_mut()[r * d + c] = is / d as f64
                            * (d as f64 * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                Self::accumulate(grads, *x, dx)?;
                Self::accumulate(grads, *gamma, dgamma)?;
                Self::accumulate(grads, *beta, dbeta)?;
            }
            Op::Activate { x, kind } => {
                let mut dx = self.value(*x).map(|v| kind.derivative(v));
                for (d, gv) in dx.data_mut().iter_mut().zip(g.data().iter()) {
                    *d *= gv;
                }
                Self::accumulate(grads, *x, dx)?;
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(y.shape());
                for ((d, s), gv) in dx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                    *d = gv * s * (1.0 - s);
                }
                Self::accumulate(grads, *x, dx)?;
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.clone())?;
            }
            Op::Scale { x, c } => {
                Self::accumulate(grads, *x, g.map(|v| c * v))?;
            }
            Op::ConcatCols { a, b } => {
                let (n, da) = self.value(*a).dims2()?;
                let (_, db_) = self.value(*b).dims2()?;
                let mut ga = Tensor::zeros(&[n, da]);
                let mut gb = Tensor::zeros(&[n, db_]);
                for r in 0..n {
                    let row = &g.data()[r * (da + db_)..(r + 1) * (da + db_)];
                    ga.data_mut()[r * da..(r + 1) * da].copy_from_slice(&row[..da]);
                    gb.data_mut()[r * db_..(r + 1) * db_].copy_from_slice(&row[da..]);
                }
                Self::accumulate(grads, *a, ga)?;
                Self::accumulate(grads, *b, gb)?;
            }
            Op::MaxRelative { u, argmin } => {
                let (n, d) = self.value(*u).dims2()?;
                let mut du = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    for c in 0..d {
                        let gv = g.data()[i * d + c];
                        du.data_mut()[i * d + c] += gv;
                        let j = argmin[i * d + c];
                        du.data_mut()[j * d + c] -= gv;
                    }
                }
                Self::accumulate(grads, *u, du)?;
            }
            Op::MaxPoolRows { x, argmax } => {
                let (n, d) = self.value(*x).dims2()?;
                let mut dx = Tensor::zeros(&[n, d]);
                for c in 0..d {
                    dx.data_mut()[argmax[c] * d + c] = g.data()[c];
                }
                Self::accumulate(grads, *x, dx)?;
            }
            Op::Merge2x2 { x, grid } => {
                let (_, d4) = self.nodes[idx].value.dims2()?;
                let d = d4 / 4;
                let (rows, cols) = *grid;
                let (r2, c2) = (rows / 2, cols / 2);
                let mut dx = Tensor::zeros(&[rows * cols, d]);
                for r in 0..r2 {
                    for c in 0..c2 {
                        let src = (r * c2 + c) * d4;
                        for (q, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                            let dst = ((2 * r + dr) * cols + (2 * c + dc)) * d;
                            dx.data_mut()[dst..dst + d]
                                .copy_from_slice(&g.data()[src + q * d..src + (q + 1) * d]);
                        }
                    }
                }
                Self::accumulate(grads, *x, dx)?;
            }
            Op::PairwiseAbsDiff { x } => {
                let (n, d) = self.value(*x).dims2()?;
                let xv = self.value(*x).data();
                let mut dx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    for j in 0..n {
                        let p = (i * n + j) * d;
                        for c in 0..d {
                            let diff = xv[i * d + c] - xv[j * d + c];
                            let s = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            let gv = g.data()[p + c] * s;
                            dx.data_mut()[i * d + c] += gv;
                            dx.data_mut()[j * d + c] -= gv;
                        }
                    }
                }
                Self::accumulate(grads, *x, dx)?;
            }
            Op::PairwiseL2 { x } => {
                let (n, d) = self.value(*x).dims2()?;
                let xv = self.value(*x).data();
                let rv = self.nodes[idx].value.data();
                let mut dx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    for j in 0..n {
                        let r = rv[i * n + j];
                        if r <= 0.0 {
                            continue;
                        }
                        let gv = g.data()[i * n + j] / r;
                        for c in 0..d {
                            let diff = xv[i * d + c] - xv[j * d + c];
                            dx.data_mut()[i * d + c] += gv * diff;
                            dx.data_mut()[j * d + c] -= gv * diff;
                        }
                    }
                }
                Self::accumulate(grads, *x, dx)?;
            }
            Op::ReshapeSquare { x } => {
                let dx = Tensor::from_vec(self.value(*x).shape(), g.data().to_vec())?;
                Self::accumulate(grads, *x, dx)?;
            }
            Op::NormalizeAffinity { ahat, row_sums } => {
                let (n, _) = self.value(*ahat).dims2()?;
                let a_out = self.nodes[idx].value.data();
                // row_dot[k] = sum_j g_kj A_kj ; col_dot[l] = sum_i g_il A_il
                let mut row_dot = vec![0.0; n];
                let mut col_dot = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let prod = g.data()[i * n + j] * a_out[i * n + j];
                        row_dot[i] += prod;
                        col_dot[j] += prod;
                    }
                }
                let mut dm = Tensor::zeros(&[n, n]);
                for k in 0..n {
                    for l in 0..n {
                        dm.data_mut()[k * n + l] = g.data()[k * n + l]
                            / (row_sums[k] * row_sums[l]).sqrt()
                            - row_dot[k] / (2.0 * row_sums[k])
                            - col_dot[l] / (2.0 * row_sums[l]);
                    }
                }
                Self::accumulate(grads, *ahat, dm)?;
            }
            Op::MatMul { a, b } => {
                let da = matmul(g, false, self.value(*b), true, self.precision)?;
                let db = matmul(self.value(*a), true, g, false, self.precision)?;
                Self::accumulate(grads, *a, da)?;
                Self::accumulate(grads, *b, db)?;
            }
            Op::SoftmaxRows { x } => {
                let p = self.nodes[idx].value.data();
                let (n, c) = self.value(*x).dims2()?;
                let mut dx = Tensor::zeros(&[n, c]);
                for r in 0..n {
                    let mut dot = 0.0;
                    for k in 0..c {
                        dot += g.data()[r * c + k] * p[r * c + k];
                    }
                    for k in 0..c {
                        dx.data_mut()[r * c + k] = p[r * c + k] * (g.data()[r * c + k] - dot);
                    }
                }
                Self::accumulate(grads, *x, dx)?;
            }
            Op::NllRows { p, labels } => {
                let gv = g.item()?;
                let (n, c) = self.value(*p).dims2()?;
                let pv = self.value(*p).data();
                let mut dp = Tensor::zeros(&[n, c]);
                for (r, &y) in labels.iter().enumerate() {
                    let val = pv[r * c + y];
                    if val >= LN_FLOOR {
                        dp.data_mut()[r * c + y] = -gv / (n as f64 * val);
                    }
                }
                Self::accumulate(grads, *p, dp)?;
            }
            Op::BcePairs { ahat, gt, mask, count } => {
                if *count == 0 {
                    return Ok(());
                }
                let gv = g.item()?;
                let av = self.value(*ahat).data();
                let mut da = Tensor::zeros(self.value(*ahat).shape());
                for idx2 in 0..av.len() {
                    if !mask[idx2] {
                        continue;
                    }
                    let raw = av[idx2];
                    if raw < BCE_CLAMP || raw > 1.0 - BCE_CLAMP {
                        continue; // inside the clamp plateau
                    }
                    let e = gt[idx2];
                    da.data_mut()[idx2] =
                        gv * (-e / raw + (1.0 - e) / (1.0 - raw)) / *count as f64;
                }
                Self::accumulate(grads, *ahat, da)?;
            }
            Op::MeanEntropy { p } => {
                let gv = g.item()?;
                let (n, _) = self.value(*p).dims2()?;
                let mut dp = Tensor::zeros(self.value(*p).shape());
                for (d, &v) in dp.data_mut().iter_mut().zip(self.value(*p).data()) {
                    if v > 0.0 {
                        *d = -gv * (v.ln() + 1.0) / n as f64;
                    }
                }
                Self::accumulate(grads, *p, dp)?;
            }
            Op::PickElement { x, index } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                dx.data_mut()[*index] = g.item()?;
                Self::accumulate(grads, *x, dx)?;
            }
            Op::SumSquares { x } => {
                let gv = g.item()?;
                let dx = self.value(*x).map(|v| 2.0 * v * gv);
                Self::accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(scalar out)/d(leaf) for a tape builder.
    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Tensor, tol: f64) {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.leaf(x0.clone());
        let out = build(&mut tape, x);
        assert_eq!(tape.value(out).len(), 1, "fd_check needs scalar output");
        let tg = tape.backward(out, None).unwrap();
        let analytic = tg.of(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));

        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let eval = |t: Tensor| {
                let mut tp = Tape::new(Precision::F64);
                let v = tp.leaf(t);
                let o = build(&mut tp, v);
                tp.value(o).item().unwrap()
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * eps);
            let rel = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
            assert!(
                rel < tol,
                "index {}: analytic {} vs fd {} (rel {})",
                i,
                analytic.data()[i],
                fd,
                rel
            );
        }
    }

    fn arb(shape: &[usize], scale: f64, shift: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 37 + 11) % 23) as f64 / 23.0 * scale + shift)
    }

    #[test]
    fn affine_forward_matches_brute_force() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.leaf(arb(&[2, 4], 2.0, -1.0));
        let w = tape.leaf(arb(&[3, 4], 1.0, -0.3));
        let b = tape.leaf(arb(&[3], 0.5, 0.1));
        let y = tape.affine(x, w, b).unwrap();
        for r in 0..2 {
            for o in 0..3 {
                let mut s = tape.value(b).data()[o];
                for k in 0..4 {
                    s += tape.value(x).data()[r * 4 + k] * tape.value(w).data()[o * 4 + k];
                }
                assert!((tape.value(y).data()[r * 3 + o] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_identity_and_zero_map() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let eye = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.affine(x, eye, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let zw = tape.leaf(Tensor::zeros(&[1, 2]));
        let b5 = tape.leaf(Tensor::from_vec(&[1], vec![5.0]).unwrap());
        let y2 = tape.affine(x, zw, b5).unwrap();
        assert_eq!(tape.value(y2).data(), &[5.0]);
    }

    #[test]
    fn affine_gradients() {
        fd_check(
            |t, x| {
                let w = t.leaf(arb(&[3, 4], 1.0, -0.4));
                let b = t.leaf(arb(&[3], 1.0, 0.0));
                let y = t.affine(x, w, b).unwrap();
                t.sum_squares(y)
            },
            arb(&[2, 4], 1.5, -0.7),
            1e-6,
        );
    }

    #[test]
    fn affine_weight_bias_gradients() {
        // Check dw and db by treating the weight as the probed leaf.
        let x0 = arb(&[2, 3], 1.0, 0.2);
        fd_check(
            |t, w| {
                let x = t.leaf(x0.clone());
                let b = t.leaf(arb(&[2], 1.0, -0.5));
                let y = t.affine(x, w, b).unwrap();
                t.sum_squares(y)
            },
            arb(&[2, 3], 0.8, -0.1),
            1e-6,
        );
    }

    #[test]
    fn layer_norm_gradients_and_stats() {
        let x0 = arb(&[3, 5], 3.0, -1.0);
        fd_check(
            |t, x| {
                let g = t.leaf(arb(&[5], 1.0, 0.5));
                let b = t.leaf(arb(&[5], 1.0, -0.2));
                let y = t.layer_norm(x, g, b).unwrap();
                t.sum_squares(y)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn activation_gradients() {
        for kind in [Activation::Gelu, Activation::Relu] {
            fd_check(
                |t, x| {
                    let y = t.activate(x, kind);
                    t.sum_squares(y)
                },
                arb(&[2, 3], 2.0, -0.9),
                1e-5,
            );
        }
    }

    #[test]
    fn sigmoid_outputs_in_unit_interval() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.leaf(arb(&[4, 4], 30.0, -15.0));
        let y = tape.sigmoid(x);
        assert!(tape.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
        fd_check(
            |t, x| {
                let y = t.sigmoid(x);
                t.sum_squares(y)
            },
            arb(&[2, 2], 4.0, -2.0),
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.leaf(arb(&[3, 7], 8.0, -4.0));
        let p = tape.softmax_rows(x).unwrap();
        for r in 0..3 {
            let s: f64 = tape.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(tape.value(p).row(r).iter().all(|&v| v > 0.0));
        }
        fd_check(
            |t, x| {
                let p = t.softmax_rows(x).unwrap();
                t.sum_squares(p)
            },
            arb(&[2, 4], 3.0, -1.0),
            1e-6,
        );
    }

    #[test]
    fn max_relative_hand_case_and_grad() {
        // 1-D features: u = [2, 0, 3]; node 0 neighbors {1, 2}:
        // max(2-0, 2-3) = 2.
        let mut tape = Tape::new(Precision::F64);
        let u = tape.leaf(Tensor::from_vec(&[3, 1], vec![2.0, 0.0, 3.0]).unwrap());
        let edges = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        let m = tape.max_relative(u, &edges).unwrap();
        assert_eq!(tape.value(m).data()[0], 2.0);

        let edges2 = edges.clone();
        fd_check(
            move |t, x| {
                let m = t.max_relative(x, &edges2).unwrap();
                t.sum_squares(m)
            },
            arb(&[3, 4], 2.0, -1.0),
            1e-6,
        );
    }

    #[test]
    fn max_relative_empty_neighbors_is_graph_error() {
        let mut tape = Tape::new(Precision::F64);
        let u = tape.leaf(Tensor::zeros(&[2, 2]));
        let err = tape.max_relative(u, &[vec![1], vec![]]).unwrap_err();
        assert!(matches!(err, HigdaError::Graph(_)));
    }

    #[test]
    fn max_pool_and_merge_grads() {
        fd_check(
            |t, x| {
                let y = t.max_pool_rows(x).unwrap();
                t.sum_squares(y)
            },
            arb(&[5, 3], 2.0, -1.0),
            1e-6,
        );
        fd_check(
            |t, x| {
                let y = t.merge_2x2(x, (2, 2)).unwrap();
                t.sum_squares(y)
            },
            arb(&[4, 3], 1.0, 0.0),
            1e-6,
        );
    }

    #[test]
    fn pairwise_ops_grads() {
        fd_check(
            |t, x| {
                let y = t.pairwise_abs_diff(x).unwrap();
                t.sum_squares(y)
            },
            arb(&[3, 4], 1.0, -0.3),
            1e-5,
        );
        fd_check(
            |t, x| {
                let y = t.pairwise_l2(x).unwrap();
                t.sum_squares(y)
            },
            arb(&[3, 4], 1.0, -0.3),
            1e-5,
        );
    }

    #[test]
    fn normalize_affinity_grad_and_losses() {
        // Build the affinity the same way the model does (sigmoid of a map of
        // pairwise abs-differences) so the symmetry precondition survives
        // perturbation of the probed leaf.
        fd_check(
            |t, x| {
                let d = t.pairwise_abs_diff(x).unwrap();
                let w = t.leaf(arb(&[1, 3], 1.0, -0.4));
                let b = t.leaf(arb(&[1], 1.0, 0.1));
                let scores = t.affine(d, w, b).unwrap();
                let sig = t.sigmoid(scores);
                let ahat = t.reshape_square(sig).unwrap();
                let a = t.normalize_affinity(ahat).unwrap();
                t.sum_squares(a)
            },
            arb(&[3, 3], 1.0, -0.5),
            1e-5,
        );
    }

    #[test]
    fn nll_bce_entropy_grads() {
        let labels = Arc::new(vec![0usize, 2]);
        fd_check(
            move |t, x| {
                let p = t.softmax_rows(x).unwrap();
                t.nll_rows(p, Arc::clone(&labels)).unwrap()
            },
            arb(&[2, 3], 2.0, -1.0),
            1e-6,
        );

        let gt = Arc::new(vec![0.0, 1.0, 1.0, 0.0]);
        let mask = Arc::new(vec![false, true, true, false]);
        fd_check(
            move |t, x| {
                let sig = t.sigmoid(x);
                let sq = t.reshape_square(sig).unwrap();
                t.bce_pairs(sq, Arc::clone(&gt), Arc::clone(&mask)).unwrap()
            },
            arb(&[4, 1], 2.0, -1.0),
            1e-6,
        );

        fd_check(
            |t, x| {
                let p = t.softmax_rows(x).unwrap();
                t.mean_entropy(p).unwrap()
            },
            arb(&[2, 4], 2.0, -1.0),
            1e-6,
        );
    }

    #[test]
    fn backward_requires_scalar_root_without_seed() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x, None).is_err());
    }

    #[test]
    fn seeded_backward_matches_manual_chain() {
        // Two-stage: y = 3x; downstream seed g yields dx = 3g.
        let mut tape = Tape::new(Precision::F64);
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.scale(x, 3.0);
        let seed = Tensor::from_vec(&[1, 2], vec![0.5, -1.0]).unwrap();
        let tg = tape.backward(y, Some(&seed)).unwrap();
        assert_eq!(tg.of(x).unwrap().data(), &[1.5, -3.0]);
    }
}
