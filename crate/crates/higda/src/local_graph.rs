//! The local-graph network: patch embedding, per-layer dynamic k-NN graph
//! construction, max-relative aggregation with projections/FFN/skips, and a
//! channelwise max-pool readout producing one global node vector per image.

use crate::error::{HigdaError, Result};
use crate::numerics::state::{
    register_affine, AffineIds, AffineMap, ModelState, ParamGroup, ParamId, ParamSnapshot,
    RunContext,
};
use crate::numerics::tape::{Activation, Tape, Var};
use crate::numerics::tensor::{Precision, Tensor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

/// One input image: pixels in `[0, 1]`, shape `H×W×3`.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub label: Option<usize>,
}

/// Per-image set of patch nodes plus k-NN edge lists.
#[derive(Debug, Clone)]
pub struct LocalGraph {
    /// `N×D` node features.
    pub nodes: Tensor,
    /// Exactly k neighbor indices per node, none equal to the node itself,
    /// ordered by (distance, index).
    pub edges: Vec<Vec<usize>>,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoGConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub k_neighbors: usize,
    pub use_positional: bool,
    pub ffn_expansion: usize,
    pub activation: Activation,
    /// Optional 2×2 node-merge stage halfway through the stack; halves the
    /// grid and doubles the channel dimension.
    pub merge_2x2: bool,
}

impl Default for LoGConfig {
    fn default() -> Self {
        LoGConfig {
            patch_size: 4,
            embed_dim: 48,
            layers: 4,
            k_neighbors: 5,
            use_positional: true,
            ffn_expansion: 4,
            activation: Activation::Gelu,
            merge_2x2: false,
        }
    }
}

impl LoGConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.ffn_expansion == 0 {
            return Err(HigdaError::Config("patch_size/embed_dim/ffn_expansion must be > 0".into()));
        }
        if self.layers == 0 {
            return Err(HigdaError::Config("layers must be >= 1".into()));
        }
        if self.k_neighbors == 0 {
            return Err(HigdaError::Config("k_neighbors must be >= 1".into()));
        }
        Ok(())
    }

    /// Feature dimension of the pooled global node vector.
    pub fn output_dim(&self) -> usize {
        if self.merge_2x2 {
            2 * self.embed_dim
        } else {
            self.embed_dim
        }
    }

    /// Block index before which the optional merge stage runs.
    fn merge_point(&self) -> usize {
        self.layers / 2
    }
}

// ── patching ──────────────────────────────────────────────────────────

/// Flatten an `H×W×3` image into a `N×(h·w·3)` patch matrix, row-major over
/// the patch grid.
pub fn extract_patches(pixels: &Tensor, patch: usize) -> Result<(Tensor, (usize, usize))> {
    let shape = pixels.shape();
    let (h, w, ch) = match shape {
        [h, w, c] => (*h, *w, *c),
        s => return Err(HigdaError::Dim(format!("expected H×W×3 image, got {:?}", s))),
    };
    if ch != 3 {
        return Err(HigdaError::Dim(format!("expected 3 channels, got {ch}")));
    }
    if h % patch != 0 || w % patch != 0 {
        return Err(HigdaError::Config(format!(
            "image {}x{} not divisible by patch size {}",
            h, w, patch
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let plen = patch * patch * 3;
    let mut out = Tensor::zeros(&[rows * cols, plen]);
    for pr in 0..rows {
        for pc in 0..cols {
            let node = pr * cols + pc;
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let src = ((pr * patch + dy) * w + (pc * patch + dx)) * 3;
                    for c in 0..3 {
                        out.data_mut()[node * plen + k] = pixels.data()[src + c];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok((out, (rows, cols)))
}

/// Patch embedding: flatten-then-affine plus an optional positional table.
/// Returns a graph with nodes only (edges empty).
pub fn embed_patches(
    img: &ImageSample,
    cfg: &LoGConfig,
    embed: &AffineMap,
    pos: Option<&Tensor>,
) -> Result<LocalGraph> {
    cfg.validate()?;
    let (patches, grid) = extract_patches(&img.pixels, cfg.patch_size)?;
    let mut tape = Tape::new(Precision::F64);
    let x = tape.leaf(patches);
    let w = tape.leaf(embed.weight.clone());
    let b = tape.leaf(embed.bias.clone());
    let mut nodes = tape.affine(x, w, b)?;
    if let Some(p) = pos {
        let pv = tape.leaf(p.clone());
        nodes = tape.add(nodes, pv)?;
    }
    Ok(LocalGraph { nodes: tape.value(nodes).clone(), edges: Vec::new(), grid })
}

// ── k-NN graph construction ───────────────────────────────────────────

/// For each node, the `k` other nodes with smallest Euclidean distance,
/// ordered by (distance, index); ties broken by smaller index.
pub fn knn_edges(nodes: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (n, d) = nodes.dims2()?;
    if k >= n {
        return Err(HigdaError::Config(format!("k_neighbors {} must be < node count {}", k, n)));
    }
    let mut edges = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let vi = nodes.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let vj = &nodes.data()[j * d..(j + 1) * d];
            let mut s = 0.0;
            for c in 0..d {
                let diff = vi[c] - vj[c];
                s += diff * diff;
            }
            cand.push((s, j));
        }
        cand.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        edges.push(cand[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(edges)
}

// ── aggregation ───────────────────────────────────────────────────────

/// Stand-alone max-relative aggregation over a populated graph:
/// `out_i = v_i + post(σ(fuse([pre(v_i) ; max_j(pre(v_i) - pre(v_j))])))`.
pub fn max_relative_aggregate(
    g: &LocalGraph,
    pre: &AffineMap,
    fuse: &AffineMap,
    post: &AffineMap,
    act: Activation,
) -> Result<Tensor> {
    if g.edges.is_empty() {
        return Err(HigdaError::Graph("edges not populated".into()));
    }
    let mut tape = Tape::new(Precision::F64);
    let x = tape.leaf(g.nodes.clone());
    let ids = |t: &mut Tape, m: &AffineMap| (t.leaf(m.weight.clone()), t.leaf(m.bias.clone()));
    let (pw, pb) = ids(&mut tape, pre);
    let (fw, fb) = ids(&mut tape, fuse);
    let (ow, ob) = ids(&mut tape, post);
    let out = max_relative_block(&mut tape, x, &g.edges, (pw, pb), (fw, fb), (ow, ob), act)?;
    Ok(tape.value(out).clone())
}

/// The shared graph-block body used by both the stand-alone op and the full
/// forward pass.
fn max_relative_block(
    tape: &mut Tape,
    x: Var,
    edges: &[Vec<usize>],
    pre: (Var, Var),
    fuse: (Var, Var),
    post: (Var, Var),
    act: Activation,
) -> Result<Var> {
    let u = tape.affine(x, pre.0, pre.1)?;
    let m = tape.max_relative(u, edges)?;
    let cat = tape.concat_cols(u, m)?;
    let h = tape.affine(cat, fuse.0, fuse.1)?;
    let h = tape.activate(h, act);
    let h = tape.affine(h, post.0, post.1)?;
    tape.add(x, h)
}

// ── parameters ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LogBlockIds {
    pub pre: AffineIds,
    pub fuse: AffineIds,
    pub post: AffineIds,
    pub ffn1: AffineIds,
    pub ffn2: AffineIds,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

/// Parameter ids of the whole local-graph network.
#[derive(Debug, Clone)]
pub struct LogParams {
    pub embed: AffineIds,
    pub pos: Option<ParamId>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub blocks: Vec<LogBlockIds>,
    pub merge: Option<AffineIds>,
    pub n_nodes: usize,
    pub patch_len: usize,
}

fn register_norm(
    state: &mut ModelState,
    name: &str,
    group: ParamGroup,
    dim: usize,
) -> Result<(ParamId, ParamId)> {
    let gamma = state.register(&format!("{name}.gamma"), group, Tensor::from_fn(&[dim], |_| 1.0))?;
    let beta = state.register(&format!("{name}.beta"), group, Tensor::zeros(&[dim]))?;
    Ok((gamma, beta))
}

impl LogParams {
    /// Register every LoG parameter for images of `image_size × image_size`.
    pub fn init(
        cfg: &LoGConfig,
        image_size: usize,
        state: &mut ModelState,
        ctx: &mut RunContext,
    ) -> Result<Self> {
        cfg.validate()?;
        if image_size % cfg.patch_size != 0 {
            return Err(HigdaError::Config(format!(
                "image size {} not divisible by patch size {}",
                image_size, cfg.patch_size
            )));
        }
        let side = image_size / cfg.patch_size;
        let n_nodes = side * side;
        if cfg.k_neighbors >= n_nodes {
            return Err(HigdaError::Config(format!(
                "k_neighbors {} must be < node count {}",
                cfg.k_neighbors, n_nodes
            )));
        }
        let g = ParamGroup::Log;
        let plen = cfg.patch_size * cfg.patch_size * 3;
        let d = cfg.embed_dim;
        let embed = register_affine(state, ctx, "log.embed", g, plen, d)?;
        let pos = if cfg.use_positional {
            // Small noise rather than zeros: distinguishes positions of
            // otherwise-identical patches so k-NN ties stay rare.
            Some(state.register("log.pos", g, ctx.uniform(&[n_nodes, d], 0.02))?)
        } else {
            None
        };
        let (norm_gamma, norm_beta) = register_norm(state, "log.norm_embed", g, d)?;
        let merge = if cfg.merge_2x2 {
            if side % 2 != 0 {
                return Err(HigdaError::Config("merge_2x2 needs an even patch grid".into()));
            }
            Some(register_affine(state, ctx, "log.merge", g, 4 * d, 2 * d)?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let dim = if cfg.merge_2x2 && i >= cfg.merge_point() { 2 * d } else { d };
            let name = format!("log.block{i}");
            let pre = register_affine(state, ctx, &format!("{name}.pre"), g, dim, dim)?;
            let fuse = register_affine(state, ctx, &format!("{name}.fuse"), g, 2 * dim, dim)?;
            let post = register_affine(state, ctx, &format!("{name}.post"), g, dim, dim)?;
            let ffn1 =
                register_affine(state, ctx, &format!("{name}.ffn1"), g, dim, cfg.ffn_expansion * dim)?;
            let ffn2 =
                register_affine(state, ctx, &format!("{name}.ffn2"), g, cfg.ffn_expansion * dim, dim)?;
            let (norm_gamma, norm_beta) = register_norm(state, &format!("{name}.norm"), g, dim)?;
            blocks.push(LogBlockIds { pre, fuse, post, ffn1, ffn2, norm_gamma, norm_beta });
        }
        Ok(LogParams { embed, pos, norm_gamma, norm_beta, blocks, merge, n_nodes, patch_len: plen })
    }
}

// ── full forward ──────────────────────────────────────────────────────

/// Tape artifacts of one image's forward pass.
pub struct LogTrace {
    /// Pooled global node vector, `1×D_G`.
    pub global: Var,
    /// Final-layer node features entering the max-pool.
    pub final_nodes: Var,
    /// k-NN edge lists of the last block.
    pub final_edges: Arc<Vec<Vec<usize>>>,
    /// Patch grid of the final stage.
    pub grid: (usize, usize),
}

/// Record the full LoG forward pass for one image on `tape`.
pub fn log_forward_tape(
    tape: &mut Tape,
    snap: &ParamSnapshot,
    pixels: &Tensor,
    cfg: &LoGConfig,
    params: &LogParams,
) -> Result<LogTrace> {
    let (patches, mut grid) = extract_patches(pixels, cfg.patch_size)?;
    let (n, plen) = patches.dims2()?;
    if n != params.n_nodes || plen != params.patch_len {
        return Err(HigdaError::Config(format!(
            "image yields {n} nodes of {plen} values, model expects {}x{}",
            params.n_nodes, params.patch_len
        )));
    }
    let px = tape.leaf(patches);
    let ew = tape.param(snap, params.embed.w);
    let eb = tape.param(snap, params.embed.b);
    let mut x = tape.affine(px, ew, eb)?;
    if let Some(pid) = params.pos {
        let pos = tape.param(snap, pid);
        x = tape.add(x, pos)?;
    }
    let gamma = tape.param(snap, params.norm_gamma);
    let beta = tape.param(snap, params.norm_beta);
    x = tape.layer_norm(x, gamma, beta)?;

    let mut final_edges: Arc<Vec<Vec<usize>>> = Arc::new(Vec::new());
    for (i, block) in params.blocks.iter().enumerate() {
        if cfg.merge_2x2 && i == cfg.merge_point() {
            let merged = tape.merge_2x2(x, grid)?;
            let ids = params.merge.as_ref().expect("merge params registered");
            let mw = tape.param(snap, ids.w);
            let mb = tape.param(snap, ids.b);
            x = tape.affine(merged, mw, mb)?;
            grid = (grid.0 / 2, grid.1 / 2);
            if cfg.k_neighbors >= grid.0 * grid.1 {
                return Err(HigdaError::Config(
                    "k_neighbors too large for the merged grid".into(),
                ));
            }
        }
        let edges = Arc::new(knn_edges(tape.value(x), cfg.k_neighbors)?);
        let pre = (tape.param(snap, block.pre.w), tape.param(snap, block.pre.b));
        let fuse = (tape.param(snap, block.fuse.w), tape.param(snap, block.fuse.b));
        let post = (tape.param(snap, block.post.w), tape.param(snap, block.post.b));
        x = max_relative_block(tape, x, &edges, pre, fuse, post, cfg.activation)?;
        // FFN with skip.
        let f1w = tape.param(snap, block.ffn1.w);
        let f1b = tape.param(snap, block.ffn1.b);
        let h = tape.affine(x, f1w, f1b)?;
        let h = tape.activate(h, cfg.activation);
        let f2w = tape.param(snap, block.ffn2.w);
        let f2b = tape.param(snap, block.ffn2.b);
        let h = tape.affine(h, f2w, f2b)?;
        x = tape.add(x, h)?;
        let ng = tape.param(snap, block.norm_gamma);
        let nb = tape.param(snap, block.norm_beta);
        x = tape.layer_norm(x, ng, nb)?;
        final_edges = edges;
    }
    let global = tape.max_pool_rows(x)?;
    Ok(LogTrace { global, final_nodes: x, final_edges, grid })
}

/// Convenience non-tape forward: one image to its global node vector `[D_G]`.
pub fn log_forward(
    pixels: &Tensor,
    cfg: &LoGConfig,
    params: &LogParams,
    state: &ModelState,
) -> Result<Tensor> {
    let snap = state.snapshot();
    let mut tape = Tape::new(Precision::F64);
    let trace = log_forward_tape(&mut tape, &snap, pixels, cfg, params)?;
    Tensor::from_vec(&[cfg.output_dim()], tape.value(trace.global).data().to_vec())
}

// ── saliency ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct AnchorNode {
    pub node: usize,
    pub neighbors: Vec<usize>,
}

/// Per-node saliency in `[0, 1]` plus the two strongest anchor nodes with
/// their final-layer neighbor lists.
#[derive(Debug, Clone)]
pub struct SaliencyReport {
    pub per_node: Vec<f64>,
    pub anchors: Vec<AnchorNode>,
    pub grid: (usize, usize),
}

/// Reduce a final-layer node gradient to normalized per-node saliency.
pub fn saliency_from_gradient(
    node_grad: &Tensor,
    edges: &[Vec<usize>],
    grid: (usize, usize),
) -> Result<SaliencyReport> {
    let (n, d) = node_grad.dims2()?;
    if edges.len() != n {
        return Err(HigdaError::Graph("edge list count does not match nodes".into()));
    }
    let mut per_node = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = 0.0;
        for c in 0..d {
            let v = node_grad.data()[i * d + c];
            s += v * v;
        }
        per_node.push(s.sqrt());
    }
    let max = per_node.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut per_node {
            *v /= max;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        per_node[b].partial_cmp(&per_node[a]).expect("finite saliency").then(a.cmp(&b))
    });
    let anchors = order
        .iter()
        .take(2)
        .map(|&i| AnchorNode { node: i, neighbors: edges[i].clone() })
        .collect();
    Ok(SaliencyReport { per_node, anchors, grid })
}

impl SaliencyReport {
    /// One CSV row per node: `node_index,row,col,saliency`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "node_index,row,col,saliency")?;
        let (_, cols) = self.grid;
        for (i, s) in self.per_node.iter().enumerate() {
            writeln!(f, "{},{},{},{}", i, i / cols, i % cols, s)?;
        }
        Ok(())
    }

    /// Anchor dump: `{"anchors":[{"node":..,"neighbors":[..]}]}`.
    pub fn write_anchor_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::json!({ "anchors": self.anchors });
        std::fs::write(path, serde_json::to_string_pretty(&body).expect("serializable"))?;
        Ok(())
    }
}
