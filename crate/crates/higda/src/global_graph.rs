//! The global-graph head: learned pairwise affinities, symmetric
//! normalization with self-connections, similarity-weighted aggregation
//! across the mini-batch, and the final classifier.

use crate::error::{HigdaError, Result};
use crate::numerics::state::{
    register_affine, AffineIds, AffineMap, ModelState, ParamGroup, ParamSnapshot, RunContext,
};
use crate::numerics::tape::{Activation, Tape, Var};
use crate::numerics::tensor::{Precision, Tensor};
use serde::{Deserialize, Serialize};

/// Label status of one global node within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeLabel {
    GroundTruth(usize),
    Pseudo(usize),
    Unlabeled,
}

impl NodeLabel {
    pub fn class(&self) -> Option<usize> {
        match self {
            NodeLabel::GroundTruth(c) | NodeLabel::Pseudo(c) => Some(*c),
            NodeLabel::Unlabeled => None,
        }
    }
}

/// Mini-batch of global node vectors with label status and ground-truth
/// edges over the non-unlabeled pairs.
#[derive(Debug, Clone)]
pub struct GlobalBatch {
    /// `N_G × D_G` node features.
    pub nodes: Tensor,
    pub labels: Vec<NodeLabel>,
    /// `N_G × N_G` {0,1} matrix; meaningful only where both endpoints carry
    /// a label. Symmetric, diagonal 1.
    pub gt_edges: Tensor,
}

/// How the edge network reads a pair of global nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeInput {
    /// Element-wise absolute difference vector (default).
    #[default]
    AbsDiff,
    /// Single scalar Euclidean distance.
    ScalarNorm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoGConfig {
    pub layers: usize,
    pub edge_hidden: usize,
    pub node_hidden: usize,
    pub out_dim: usize,
    pub edge_input: EdgeInput,
    pub activation: Activation,
}

impl Default for GoGConfig {
    fn default() -> Self {
        GoGConfig {
            layers: 1,
            edge_hidden: 32,
            node_hidden: 64,
            out_dim: 48,
            edge_input: EdgeInput::AbsDiff,
            activation: Activation::Gelu,
        }
    }
}

impl GoGConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(HigdaError::Config("gog layers must be >= 1".into()));
        }
        if self.edge_hidden == 0 || self.node_hidden == 0 || self.out_dim == 0 {
            return Err(HigdaError::Config("gog hidden/output dims must be > 0".into()));
        }
        Ok(())
    }
}

// ── parameters ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GogLayerIds {
    pub edge1: AffineIds,
    pub edge2: AffineIds,
    pub node1: AffineIds,
    pub node2: AffineIds,
}

#[derive(Debug, Clone)]
pub struct GogParams {
    pub layers: Vec<GogLayerIds>,
    pub classifier: AffineIds,
    pub in_dim: usize,
    pub classes: usize,
}

impl GogParams {
    pub fn init(
        cfg: &GoGConfig,
        in_dim: usize,
        classes: usize,
        state: &mut ModelState,
        ctx: &mut RunContext,
    ) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(HigdaError::Config("need at least 2 classes".into()));
        }
        let g = ParamGroup::Gog;
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut dim = in_dim;
        for i in 0..cfg.layers {
            let name = format!("gog.layer{i}");
            let edge_in = match cfg.edge_input {
                EdgeInput::AbsDiff => dim,
                EdgeInput::ScalarNorm => 1,
            };
            let edge1 = register_affine(state, ctx, &format!("{name}.edge1"), g, edge_in, cfg.edge_hidden)?;
            let edge2 = register_affine(state, ctx, &format!("{name}.edge2"), g, cfg.edge_hidden, 1)?;
            let node1 = register_affine(state, ctx, &format!("{name}.node1"), g, 2 * dim, cfg.node_hidden)?;
            let node2 = register_affine(state, ctx, &format!("{name}.node2"), g, cfg.node_hidden, cfg.out_dim)?;
            layers.push(GogLayerIds { edge1, edge2, node1, node2 });
            dim = cfg.out_dim;
        }
        let classifier = register_affine(state, ctx, "gog.classifier", g, dim, classes)?;
        Ok(GogParams { layers, classifier, in_dim, classes })
    }
}

// ── stand-alone operations ────────────────────────────────────────────

/// Learned pairwise affinities: `sigmoid(f_E(|v_i - v_j|))`, symmetric by
/// construction, diagonal computed like any pair.
pub fn edge_scores(
    nodes: &Tensor,
    edge1: &AffineMap,
    edge2: &AffineMap,
    act: Activation,
    input: EdgeInput,
) -> Result<Tensor> {
    let mut tape = Tape::new(Precision::F64);
    let x = tape.leaf(nodes.clone());
    let e1 = (tape.leaf(edge1.weight.clone()), tape.leaf(edge1.bias.clone()));
    let e2 = (tape.leaf(edge2.weight.clone()), tape.leaf(edge2.bias.clone()));
    let ahat = edge_scores_tape(&mut tape, x, e1, e2, act, input)?;
    Ok(tape.value(ahat).clone())
}

fn edge_scores_tape(
    tape: &mut Tape,
    nodes: Var,
    edge1: (Var, Var),
    edge2: (Var, Var),
    act: Activation,
    input: EdgeInput,
) -> Result<Var> {
    let pairs = match input {
        EdgeInput::AbsDiff => tape.pairwise_abs_diff(nodes)?,
        EdgeInput::ScalarNorm => tape.pairwise_l2(nodes)?,
    };
    let h = tape.affine(pairs, edge1.0, edge1.1)?;
    let h = tape.activate(h, act);
    let scores = tape.affine(h, edge2.0, edge2.1)?;
    let sig = tape.sigmoid(scores);
    tape.reshape_square(sig)
}

/// `A = D^{-1/2}(Â + I)D^{-1/2}` where `D` is the degree matrix of `Â + I`.
pub fn normalize_affinity(ahat: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new(Precision::F64);
    let a = tape.leaf(ahat.clone());
    let out = tape.normalize_affinity(a)?;
    Ok(tape.value(out).clone())
}

/// `v'_i = f_N([v_i ; Σ_j a_ij v_j])` with a two-layer node network.
pub fn aggregate_nodes(
    nodes: &Tensor,
    a: &Tensor,
    node1: &AffineMap,
    node2: &AffineMap,
    act: Activation,
) -> Result<Tensor> {
    let mut tape = Tape::new(Precision::F64);
    let x = tape.leaf(nodes.clone());
    let av = tape.leaf(a.clone());
    let n1 = (tape.leaf(node1.weight.clone()), tape.leaf(node1.bias.clone()));
    let n2 = (tape.leaf(node2.weight.clone()), tape.leaf(node2.bias.clone()));
    let out = aggregate_nodes_tape(&mut tape, x, av, n1, n2, act)?;
    Ok(tape.value(out).clone())
}

fn aggregate_nodes_tape(
    tape: &mut Tape,
    nodes: Var,
    a: Var,
    node1: (Var, Var),
    node2: (Var, Var),
    act: Activation,
) -> Result<Var> {
    let agg = tape.matmul_vars(a, nodes)?;
    let cat = tape.concat_cols(nodes, agg)?;
    let h = tape.affine(cat, node1.0, node1.1)?;
    let h = tape.activate(h, act);
    tape.affine(h, node2.0, node2.1)
}

// ── full forward ──────────────────────────────────────────────────────

/// Tape artifacts of one batch's GoG pass.
pub struct GogTrace {
    /// `N_G × C` class probabilities.
    pub probs: Var,
    pub logits: Var,
    /// Unnormalized affinity matrix of the last layer (edge supervision).
    pub ahat: Var,
    /// Pre-classifier node features (embedding export).
    pub pre_classifier: Var,
}

pub fn gog_forward_tape(
    tape: &mut Tape,
    snap: &ParamSnapshot,
    nodes: Var,
    cfg: &GoGConfig,
    params: &GogParams,
) -> Result<GogTrace> {
    let (n, d) = tape.value(nodes).dims2()?;
    if n == 0 {
        return Err(HigdaError::Contract("empty batch".into()));
    }
    if d != params.in_dim {
        return Err(HigdaError::Dim(format!(
            "gog expects {}-dim nodes, got {d}",
            params.in_dim
        )));
    }
    let mut x = nodes;
    let mut last_ahat = None;
    for layer in &params.layers {
        let e1 = (tape.param(snap, layer.edge1.w), tape.param(snap, layer.edge1.b));
        let e2 = (tape.param(snap, layer.edge2.w), tape.param(snap, layer.edge2.b));
        let ahat = edge_scores_tape(tape, x, e1, e2, cfg.activation, cfg.edge_input)?;
        let a = tape.normalize_affinity(ahat)?;
        let n1 = (tape.param(snap, layer.node1.w), tape.param(snap, layer.node1.b));
        let n2 = (tape.param(snap, layer.node2.w), tape.param(snap, layer.node2.b));
        x = aggregate_nodes_tape(tape, x, a, n1, n2, cfg.activation)?;
        last_ahat = Some(ahat);
    }
    let cw = tape.param(snap, params.classifier.w);
    let cb = tape.param(snap, params.classifier.b);
    let logits = tape.affine(x, cw, cb)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(GogTrace { probs, logits, ahat: last_ahat.expect("at least one layer"), pre_classifier: x })
}

/// Batch forward: class probabilities and the last layer's unnormalized
/// affinities.
pub fn gog_forward(
    batch: &GlobalBatch,
    cfg: &GoGConfig,
    params: &GogParams,
    state: &ModelState,
) -> Result<(Tensor, Tensor)> {
    let snap = state.snapshot();
    let mut tape = Tape::new(Precision::F64);
    let nodes = tape.leaf(batch.nodes.clone());
    let trace = gog_forward_tape(&mut tape, &snap, nodes, cfg, params)?;
    Ok((tape.value(trace.probs).clone(), tape.value(trace.ahat).clone()))
}

// ── spectral utilities ────────────────────────────────────────────────

/// Largest-magnitude eigenvalue estimate by power iteration from a seeded
/// positive start vector.
pub fn spectral_radius(a: &Tensor, iters: usize) -> Result<f64> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(HigdaError::Dim("spectral_radius expects square input".into()));
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.37).sin().abs()).collect();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let mut w = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                w[i] += a.data()[i * n + j] * v[j];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        for x in &mut w {
            *x /= norm;
        }
        // Rayleigh quotient
        let mut aw = 0.0;
        for i in 0..n {
            for j in 0..n {
                aw += w[i] * a.data()[i * n + j] * w[j];
            }
        }
        lambda = aw;
        v = w;
    }
    Ok(lambda.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_check, FdConfig};
    use crate::numerics::state::Grads;

    fn maps(ctx: &mut RunContext, dims: &[(usize, usize)]) -> Vec<AffineMap> {
        dims.iter()
            .map(|&(i, o)| {
                AffineMap::new(ctx.xavier_uniform(&[o, i], i, o), ctx.uniform(&[o], 0.1)).unwrap()
            })
            .collect()
    }

    #[test]
    fn edge_scores_equal_nodes_and_symmetry() {
        let mut ctx = RunContext::from_seed(4);
        let m = maps(&mut ctx, &[(3, 5), (5, 1)]);
        // two identical rows, one distinct
        let nodes =
            Tensor::from_vec(&[3, 3], vec![0.2, -0.1, 0.4, 0.2, -0.1, 0.4, 1.0, 2.0, -1.0])
                .unwrap();
        let ahat = edge_scores(&nodes, &m[0], &m[1], Activation::Gelu, EdgeInput::AbsDiff).unwrap();
        // identical inputs: score of (0,1) equals the diagonal score sigmoid(f_E(0))
        assert_eq!(ahat.data()[0 * 3 + 1], ahat.data()[0 * 3 + 0]);
        // exact symmetry
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(ahat.data()[i * 3 + j], ahat.data()[j * 3 + i]);
            }
            for j in 0..3 {
                let v = ahat.data()[i * 3 + j];
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn edge_scores_match_per_pair_oracle() {
        let mut ctx = RunContext::from_seed(9);
        let m = maps(&mut ctx, &[(4, 6), (6, 1)]);
        let nodes = ctx.xavier_uniform(&[5, 4], 4, 4);
        let ahat = edge_scores(&nodes, &m[0], &m[1], Activation::Gelu, EdgeInput::AbsDiff).unwrap();
        let apply = |mm: &AffineMap, x: &[f64]| -> Vec<f64> {
            let (o, i) = mm.weight.dims2().unwrap();
            (0..o)
                .map(|r| {
                    mm.bias.data()[r]
                        + (0..i).map(|k| mm.weight.data()[r * i + k] * x[k]).sum::<f64>()
                })
                .collect()
        };
        for i in 0..5 {
            for j in 0..5 {
                let d: Vec<f64> = (0..4)
                    .map(|c| (nodes.data()[i * 4 + c] - nodes.data()[j * 4 + c]).abs())
                    .collect();
                let h: Vec<f64> =
                    apply(&m[0], &d).iter().map(|&v| Activation::Gelu.apply(v)).collect();
                let s = apply(&m[1], &h)[0];
                let expect = 1.0 / (1.0 + (-s).exp());
                assert!((ahat.data()[i * 5 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_norm_mode_runs() {
        let mut ctx = RunContext::from_seed(10);
        let m = maps(&mut ctx, &[(1, 4), (4, 1)]);
        let nodes = ctx.xavier_uniform(&[4, 6], 6, 6);
        let ahat =
            edge_scores(&nodes, &m[0], &m[1], Activation::Gelu, EdgeInput::ScalarNorm).unwrap();
        assert_eq!(ahat.shape(), &[4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(ahat.data()[i * 4 + j], ahat.data()[j * 4 + i]);
            }
        }
    }

    #[test]
    fn normalize_affinity_trivial_cases() {
        // zero matrix -> identity
        let a = normalize_affinity(&Tensor::zeros(&[3, 3])).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(a.data()[i * 3 + j], expect);
            }
        }
        // N=2 hand case
        let ahat = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let a = normalize_affinity(&ahat).unwrap();
        for v in a.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_affinity_rejects_asymmetric() {
        let bad = Tensor::from_vec(&[2, 2], vec![0.0, 0.5, 0.25, 0.0]).unwrap();
        assert!(matches!(normalize_affinity(&bad), Err(HigdaError::Contract(_))));
    }

    #[test]
    fn normalized_matrix_eigen_identity_and_radius() {
        let mut ctx = RunContext::from_seed(21);
        // random symmetric Â in (0,1)
        let n = 6;
        let mut ahat = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..=i {
                let v = 0.5 + 0.49 * (ctx.uniform(&[1], 1.0).data()[0]);
                ahat.data_mut()[i * n + j] = v;
                ahat.data_mut()[j * n + i] = v;
            }
        }
        let a = normalize_affinity(&ahat).unwrap();
        // row sums of M = Â + I
        let d: Vec<f64> = (0..n)
            .map(|i| 1.0 + (0..n).map(|j| ahat.data()[i * n + j]).sum::<f64>())
            .collect();
        // A · d^{1/2} = d^{1/2}
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += a.data()[i * n + j] * d[j].sqrt();
            }
            assert!((s - d[i].sqrt()).abs() < 1e-9, "eigen identity row {i}");
        }
        let rho = spectral_radius(&a, 300).unwrap();
        assert!((rho - 1.0).abs() < 1e-6, "spectral radius {rho}");
    }

    #[test]
    fn aggregate_identity_affinity_uses_own_vector() {
        let mut ctx = RunContext::from_seed(30);
        let m = maps(&mut ctx, &[(8, 5), (5, 4)]);
        let nodes = ctx.xavier_uniform(&[3, 4], 4, 4);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let out = aggregate_nodes(&nodes, &eye, &m[0], &m[1], Activation::Relu).unwrap();
        // reference: f_N([v_i ; v_i])
        for i in 0..3 {
            let mut cat = nodes.row(i).to_vec();
            cat.extend_from_slice(nodes.row(i));
            let apply = |mm: &AffineMap, x: &[f64]| -> Vec<f64> {
                let (o, ii) = mm.weight.dims2().unwrap();
                (0..o)
                    .map(|r| {
                        mm.bias.data()[r]
                            + (0..ii).map(|k| mm.weight.data()[r * ii + k] * x[k]).sum::<f64>()
                    })
                    .collect()
            };
            let h: Vec<f64> = apply(&m[0], &cat).iter().map(|&v| v.max(0.0)).collect();
            let expect = apply(&m[1], &h);
            for c in 0..4 {
                assert!((out.data()[i * 4 + c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_matches_per_node_oracle() {
        let mut ctx = RunContext::from_seed(31);
        let m = maps(&mut ctx, &[(8, 6), (6, 3)]);
        let nodes = ctx.xavier_uniform(&[4, 4], 4, 4);
        let mut ahat = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            for j in 0..=i {
                let v = 0.3 + 0.3 * ((i + j) as f64 * 0.71).sin().abs();
                ahat.data_mut()[i * 4 + j] = v;
                ahat.data_mut()[j * 4 + i] = v;
            }
        }
        let a = normalize_affinity(&ahat).unwrap();
        let out = aggregate_nodes(&nodes, &a, &m[0], &m[1], Activation::Gelu).unwrap();
        for i in 0..4 {
            let mut agg = vec![0.0; 4];
            for j in 0..4 {
                for c in 0..4 {
                    agg[c] += a.data()[i * 4 + j] * nodes.data()[j * 4 + c];
                }
            }
            let mut cat = nodes.row(i).to_vec();
            cat.extend_from_slice(&agg);
            let apply = |mm: &AffineMap, x: &[f64]| -> Vec<f64> {
                let (o, ii) = mm.weight.dims2().unwrap();
                (0..o)
                    .map(|r| {
                        mm.bias.data()[r]
                            + (0..ii).map(|k| mm.weight.data()[r * ii + k] * x[k]).sum::<f64>()
                    })
                    .collect()
            };
            let h: Vec<f64> =
                apply(&m[0], &cat).iter().map(|&v| Activation::Gelu.apply(v)).collect();
            let expect = apply(&m[1], &h);
            for c in 0..3 {
                assert!((out.data()[i * 3 + c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    fn forward_probs(nodes: &Tensor, cfg: &GoGConfig, params: &GogParams, state: &ModelState) -> Tensor {
        let batch = GlobalBatch {
            nodes: nodes.clone(),
            labels: vec![NodeLabel::Unlabeled; nodes.shape()[0]],
            gt_edges: Tensor::zeros(&[nodes.shape()[0], nodes.shape()[0]]),
        };
        gog_forward(&batch, cfg, params, state).unwrap().0
    }

    #[test]
    fn gog_forward_rows_sum_to_one_and_singleton_works() {
        let cfg = GoGConfig { out_dim: 6, edge_hidden: 5, node_hidden: 7, ..Default::default() };
        let mut state = ModelState::new();
        let mut ctx = RunContext::from_seed(52);
        let params = GogParams::init(&cfg, 4, 3, &mut state, &mut ctx).unwrap();
        let nodes = ctx.xavier_uniform(&[5, 4], 4, 4);
        let probs = forward_probs(&nodes, &cfg, &params, &state);
        assert_eq!(probs.shape(), &[5, 3]);
        for r in 0..5 {
            let s: f64 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let single = Tensor::from_vec(&[1, 4], nodes.row(0).to_vec()).unwrap();
        let p1 = forward_probs(&single, &cfg, &params, &state);
        assert_eq!(p1.shape(), &[1, 3]);
        assert!((p1.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duplicated_sample_rows_agree() {
        let cfg = GoGConfig { out_dim: 5, edge_hidden: 4, node_hidden: 6, ..Default::default() };
        let mut state = ModelState::new();
        let mut ctx = RunContext::from_seed(53);
        let params = GogParams::init(&cfg, 3, 4, &mut state, &mut ctx).unwrap();
        let mut nodes = ctx.xavier_uniform(&[4, 3], 3, 3);
        // duplicate row 1 into row 3
        let row1 = nodes.row(1).to_vec();
        nodes.data_mut()[9..12].copy_from_slice(&row1);
        let probs = forward_probs(&nodes, &cfg, &params, &state);
        for c in 0..4 {
            let a = probs.data()[1 * 4 + c];
            let b = probs.data()[3 * 4 + c];
            assert!((a - b).abs() < 1e-12, "class {c}: {a} vs {b}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = GoGConfig { out_dim: 5, edge_hidden: 4, node_hidden: 6, ..Default::default() };
        let mut state = ModelState::new();
        let mut ctx = RunContext::from_seed(54);
        let params = GogParams::init(&cfg, 3, 3, &mut state, &mut ctx).unwrap();
        let nodes = ctx.xavier_uniform(&[5, 3], 3, 3);
        let probs = forward_probs(&nodes, &cfg, &params, &state);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Tensor::zeros(&[5, 3]);
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data_mut()[dst * 3..(dst + 1) * 3].copy_from_slice(nodes.row(src));
        }
        let probs_p = forward_probs(&permuted, &cfg, &params, &state);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                let a = probs.data()[src * 3 + c];
                let b = probs_p.data()[dst * 3 + c];
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_check_through_full_head() {
        let cfg = GoGConfig { out_dim: 4, edge_hidden: 3, node_hidden: 5, ..Default::default() };
        let mut state = ModelState::new();
        let mut ctx = RunContext::from_seed(55);
        let params = GogParams::init(&cfg, 3, 3, &mut state, &mut ctx).unwrap();
        let nodes = ctx.xavier_uniform(&[4, 3], 3, 3);

        let loss = |st: &ModelState| -> crate::error::Result<f64> {
            let snap = st.snapshot();
            let mut tape = Tape::new(Precision::F64);
            let x = tape.leaf(nodes.clone());
            let tr = gog_forward_tape(&mut tape, &snap, x, &cfg, &params)?;
            let sq = tape.sum_squares(tr.probs);
            tape.value(sq).item()
        };
        let snap = state.snapshot();
        let mut tape = Tape::new(Precision::F64);
        let x = tape.leaf(nodes.clone());
        let tr = gog_forward_tape(&mut tape, &snap, x, &cfg, &params).unwrap();
        let sq = tape.sum_squares(tr.probs);
        let tg = tape.backward(sq, None).unwrap();
        let mut grads = Grads::new(&state);
        tape.export_param_grads(&tg, &mut grads).unwrap();
        grads.fill_missing_with_zeros(&state);
        let err = finite_diff_check(
            &mut state,
            &grads,
            loss,
            &FdConfig { samples_per_param: 6, ..Default::default() },
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
