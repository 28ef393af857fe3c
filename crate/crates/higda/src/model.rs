//! Assembly of the full model: per-image local-graph forward passes feeding
//! the batch-level global-graph head, with gradients flowing back across the
//! seam.

use crate::error::{HigdaError, Result};
use crate::global_graph::{gog_forward_tape, GoGConfig, GogParams, GogTrace};
use crate::local_graph::{
    log_forward_tape, saliency_from_gradient, LoGConfig, LogParams, LogTrace, SaliencyReport,
};
use crate::numerics::state::{Grads, ModelState, ParamSnapshot, RunContext};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Precision, Tensor};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct HigdaModel {
    pub log_cfg: LoGConfig,
    pub gog_cfg: GoGConfig,
    pub classes: usize,
    pub image_size: usize,
    pub precision: Precision,
    pub state: ModelState,
    pub log_params: LogParams,
    pub gog_params: GogParams,
}

impl HigdaModel {
    pub fn new(
        log_cfg: LoGConfig,
        gog_cfg: GoGConfig,
        classes: usize,
        image_size: usize,
        precision: Precision,
        ctx: &mut RunContext,
    ) -> Result<Self> {
        let mut state = ModelState::new();
        let log_params = LogParams::init(&log_cfg, image_size, &mut state, ctx)?;
        let gog_params =
            GogParams::init(&gog_cfg, log_cfg.output_dim(), classes, &mut state, ctx)?;
        Ok(HigdaModel {
            log_cfg,
            gog_cfg,
            classes,
            image_size,
            precision,
            state,
            log_params,
            gog_params,
        })
    }

    /// Run the full stack over a batch of images. The per-image tapes and the
    /// batch tape are kept so gradients can flow back through the seam.
    pub fn forward_batch(&self, images: &[&Tensor]) -> Result<BatchForward> {
        self.forward_batch_with(&self.state.snapshot(), images)
    }

    pub fn forward_batch_with(
        &self,
        snap: &ParamSnapshot,
        images: &[&Tensor],
    ) -> Result<BatchForward> {
        if images.is_empty() {
            return Err(HigdaError::Contract("empty batch".into()));
        }
        let per_image: Vec<(Tape, LogTrace)> = images
            .par_iter()
            .map(|pixels| {
                let mut tape = Tape::new(self.precision);
                let trace =
                    log_forward_tape(&mut tape, snap, pixels, &self.log_cfg, &self.log_params)?;
                Ok((tape, trace))
            })
            .collect::<Result<_>>()?;

        let d = self.log_cfg.output_dim();
        let mut nodes = Tensor::zeros(&[images.len(), d]);
        for (i, (tape, trace)) in per_image.iter().enumerate() {
            nodes.data_mut()[i * d..(i + 1) * d].copy_from_slice(tape.value(trace.global).data());
        }
        let mut batch_tape = Tape::new(self.precision);
        let nodes_var = batch_tape.leaf(nodes);
        let gog = gog_forward_tape(&mut batch_tape, snap, nodes_var, &self.gog_cfg, &self.gog_params)?;
        let (tapes, traces) = per_image.into_iter().unzip();
        Ok(BatchForward { image_tapes: tapes, traces, batch_tape, nodes_var, gog })
    }

    /// Class probabilities for a batch (no gradient artifacts kept).
    pub fn predict_probs(&self, images: &[&Tensor]) -> Result<Tensor> {
        let fwd = self.forward_batch(images)?;
        Ok(fwd.probs().clone())
    }

    /// Per-node saliency of `target_class` for one image: gradient of the
    /// target logit (singleton-mode forward) w.r.t. the final-layer node
    /// features, reduced to normalized per-node magnitudes plus the two
    /// strongest anchors with their final-layer neighbor lists.
    pub fn node_saliency(&self, pixels: &Tensor, target_class: usize) -> Result<SaliencyReport> {
        if target_class >= self.classes {
            return Err(HigdaError::Contract(format!(
                "target class {} out of range (C={})",
                target_class, self.classes
            )));
        }
        let mut fwd = self.forward_batch(&[pixels])?;
        let root = fwd.batch_tape_pick_logit(0, target_class)?;
        let tg = fwd.batch_tape.backward(root, None)?;
        let d_nodes = tg
            .of(fwd.nodes_var)
            .ok_or_else(|| HigdaError::Graph("no gradient reached the global node".into()))?;
        let seed = Tensor::from_vec(&[1, d_nodes.shape()[1]], d_nodes.row(0).to_vec())?;
        let trace = &fwd.traces[0];
        let itg = fwd.image_tapes[0].backward(trace.global, Some(&seed))?;
        let node_grad = itg.of(trace.final_nodes).cloned().unwrap_or_else(|| {
            Tensor::zeros(fwd.image_tapes[0].value(trace.final_nodes).shape())
        });
        saliency_from_gradient(&node_grad, &trace.final_edges, trace.grid)
    }
}

/// Forward artifacts of one batch, ready for loss construction and backward.
pub struct BatchForward {
    pub image_tapes: Vec<Tape>,
    pub traces: Vec<LogTrace>,
    pub batch_tape: Tape,
    pub nodes_var: Var,
    pub gog: GogTrace,
}

impl BatchForward {
    pub fn probs(&self) -> &Tensor {
        self.batch_tape.value(self.gog.probs)
    }

    pub fn ahat(&self) -> &Tensor {
        self.batch_tape.value(self.gog.ahat)
    }

    pub fn pre_classifier(&self) -> &Tensor {
        self.batch_tape.value(self.gog.pre_classifier)
    }

    pub fn logits(&self) -> &Tensor {
        self.batch_tape.value(self.gog.logits)
    }

    fn batch_tape_pick_logit(&mut self, row: usize, class: usize) -> Result<Var> {
        self.batch_tape.pick(self.gog.logits, row, class)
    }

    /// Backward from a scalar root recorded on the batch tape, through the
    /// per-image tapes, into parameter gradients. Accumulation order is fixed
    /// (batch tape first, then images in order) so results are deterministic
    /// regardless of thread count.
    pub fn backward_scalar(&self, model: &HigdaModel, root: Var) -> Result<Grads> {
        let tg = self.batch_tape.backward(root, None)?;
        let mut grads = Grads::new(&model.state);
        self.batch_tape.export_param_grads(&tg, &mut grads)?;
        let d_nodes = match tg.of(self.nodes_var) {
            Some(g) => g,
            None => return Ok(grads), // root does not depend on the images
        };
        let d = d_nodes.shape()[1];
        let image_grads: Vec<crate::numerics::tape::TapeGrads> = self
            .image_tapes
            .par_iter()
            .zip(self.traces.par_iter())
            .enumerate()
            .map(|(i, (tape, trace))| {
                let seed = Tensor::from_vec(&[1, d], d_nodes.row(i).to_vec())?;
                tape.backward(trace.global, Some(&seed))
            })
            .collect::<Result<_>>()?;
        for (tape, itg) in self.image_tapes.iter().zip(image_grads.iter()) {
            tape.export_param_grads(itg, &mut grads)?;
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_check, FdConfig};

    fn tiny_model(seed: u64) -> HigdaModel {
        let log_cfg = LoGConfig {
            embed_dim: 6,
            layers: 2,
            k_neighbors: 3,
            patch_size: 4,
            ..Default::default()
        };
        let gog_cfg = GoGConfig { out_dim: 5, edge_hidden: 4, node_hidden: 6, ..Default::default() };
        let mut ctx = RunContext::from_seed(seed);
        HigdaModel::new(log_cfg, gog_cfg, 3, 16, Precision::F64, &mut ctx).unwrap()
    }

    fn images(n: usize, seed: usize) -> Vec<Tensor> {
        (0..n)
            .map(|i| {
                Tensor::from_fn(&[16, 16, 3], |k| {
                    (((k * 7 + i * 131 + seed * 17 + 3) % 97) as f64) / 97.0
                })
            })
            .collect()
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = tiny_model(11);
        let imgs = images(4, 0);
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let p1 = model.predict_probs(&refs).unwrap();
        let p2 = model.predict_probs(&refs).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.shape(), &[4, 3]);
    }

    #[test]
    fn end_to_end_gradient_check() {
        let mut model = tiny_model(13);
        let imgs = images(3, 1);

        let log_cfg = model.log_cfg.clone();
        let gog_cfg = model.gog_cfg.clone();
        let log_params = model.log_params.clone();
        let gog_params = model.gog_params.clone();
        let imgs2 = imgs.clone();
        let loss = move |st: &ModelState| -> Result<f64> {
            let snap = st.snapshot();
            let per: Vec<Tensor> = imgs2
                .iter()
                .map(|px| {
                    let mut tape = Tape::new(Precision::F64);
                    let tr = log_forward_tape(&mut tape, &snap, px, &log_cfg, &log_params)?;
                    Ok(tape.value(tr.global).clone())
                })
                .collect::<Result<_>>()?;
            let d = log_cfg.output_dim();
            let mut nodes = Tensor::zeros(&[per.len(), d]);
            for (i, t) in per.iter().enumerate() {
                nodes.data_mut()[i * d..(i + 1) * d].copy_from_slice(t.data());
            }
            let mut bt = Tape::new(Precision::F64);
            let nv = bt.leaf(nodes);
            let tr = gog_forward_tape(&mut bt, &snap, nv, &gog_cfg, &gog_params)?;
            let sq = bt.sum_squares(tr.probs);
            bt.value(sq).item()
        };

        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut fwd = model.forward_batch(&refs).unwrap();
        let root = fwd.batch_tape.sum_squares(fwd.gog.probs);
        let mut grads = fwd.backward_scalar(&model, root).unwrap();
        grads.fill_missing_with_zeros(&model.state);

        let err = finite_diff_check(
            &mut model.state,
            &grads,
            loss,
            &FdConfig { samples_per_param: 3, ..Default::default() },
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn saliency_contract() {
        let model = tiny_model(7);
        let img = &images(1, 2)[0];
        let rep = model.node_saliency(img, 1).unwrap();
        assert_eq!(rep.per_node.len(), 16);
        let max = rep.per_node.iter().cloned().fold(0.0f64, f64::max);
        assert!(rep.per_node.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((max - 1.0).abs() < 1e-12 || max == 0.0);
        assert_eq!(rep.anchors.len(), 2);
        assert!(model.node_saliency(img, 99).is_err());
    }

    #[test]
    fn zeroed_classifier_yields_zero_saliency() {
        let mut model = tiny_model(19);
        let wid = model.gog_params.classifier.w;
        let bid = model.gog_params.classifier.b;
        for id in [wid, bid] {
            let p = model.state.param_mut(id);
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let img = &images(1, 3)[0];
        let rep = model.node_saliency(img, 0).unwrap();
        assert!(rep.per_node.iter().all(|&v| v == 0.0));
    }
}
