//! Loss functions: node cross-entropy, global edge BCE, their unit-weight
//! combination, unlabeled prediction entropy, and the signed per-group
//! gradient application that realizes the minimax updates.

use crate::error::{HigdaError, Result};
use crate::global_graph::NodeLabel;
use crate::model::HigdaModel;
use crate::numerics::state::{Grads, ModelState, ParamGroup};
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};

const LN_FLOOR: f64 = 1e-12;
const BCE_CLAMP: f64 = 1e-7;

/// Losses of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub node_loss: f64,
    pub edge_loss: f64,
    pub total: f64,
    /// Mean prediction entropy of the unlabeled batch, when one was used.
    pub entropy: Option<f64>,
}

impl LossReport {
    pub fn new(node_loss: f64, edge_loss: f64) -> Self {
        LossReport { node_loss, edge_loss, total: node_loss + edge_loss, entropy: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MinimaxMethod {
    #[default]
    None,
    Mme,
    Plugin,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinimaxConfig {
    pub lambda: f64,
    pub method: MinimaxMethod,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        MinimaxConfig { lambda: 0.1, method: MinimaxMethod::None }
    }
}

impl MinimaxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(HigdaError::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy `-(1/N) Σ log p_i[y_i]` over labeled rows. An
/// unlabeled row is a contract violation: those are excluded upstream.
pub fn node_loss(probs: &Tensor, labels: &[NodeLabel]) -> Result<f64> {
    let (n, c) = probs.dims2()?;
    if labels.len() != n {
        return Err(HigdaError::Contract(format!("{} rows, {} labels", n, labels.len())));
    }
    let mut total = 0.0;
    for (r, label) in labels.iter().enumerate() {
        let y = label
            .class()
            .ok_or_else(|| HigdaError::Contract(format!("unlabeled row {r} in node loss")))?;
        if y >= c {
            return Err(HigdaError::Contract(format!("label {y} out of range {c}")));
        }
        total -= probs.data()[r * c + y].max(LN_FLOOR).ln();
    }
    Ok(total / n as f64)
}

/// Mean binary cross-entropy over defined off-diagonal pairs (both endpoints
/// labeled or pseudo-labeled). Scores exactly 0 or 1 are clamped to
/// `[1e-7, 1-1e-7]` before the log, with a warning.
pub fn edge_loss(ahat: &Tensor, gt_edges: &Tensor, labels: &[NodeLabel]) -> Result<f64> {
    let (n, m) = ahat.dims2()?;
    if n != m || gt_edges.shape() != [n, n] || labels.len() != n {
        return Err(HigdaError::Dim("edge_loss shape mismatch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut clamped = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j || labels[i].class().is_none() || labels[j].class().is_none() {
                continue;
            }
            let raw = ahat.data()[i * n + j];
            if !(0.0..=1.0).contains(&raw) {
                return Err(HigdaError::Contract(format!("affinity {raw} outside [0, 1]")));
            }
            let a = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if a != raw {
                clamped += 1;
            }
            let e = gt_edges.data()[i * n + j];
            total += -e * a.ln() - (1.0 - e) * (1.0 - a).ln();
            count += 1;
        }
    }
    if clamped > 0 {
        log::warn!("edge loss clamped {clamped} affinity value(s) away from {{0, 1}}");
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Unit-weight combination of node and edge losses.
pub fn higda_loss(
    probs: &Tensor,
    ahat: &Tensor,
    gt_edges: &Tensor,
    labels: &[NodeLabel],
) -> Result<LossReport> {
    let node = node_loss(probs, labels)?;
    let edge = edge_loss(ahat, gt_edges, labels)?;
    Ok(LossReport::new(node, edge))
}

/// Mean Shannon entropy of probability rows, with `0·log 0 := 0`.
pub fn entropy_loss(probs: &Tensor) -> Result<f64> {
    let (n, _) = probs.dims2()?;
    let mut total = 0.0;
    for &v in probs.data() {
        if v > 0.0 {
            total -= v * v.ln();
        }
    }
    Ok(total / n as f64)
}

/// Scale entropy gradients by `+λ` for local-graph parameters and `-λ` for
/// global-graph parameters: the two sides of the minimax objective, applied
/// as one combined signed step.
pub fn minimax_apply(grads_h: &Grads, cfg: &MinimaxConfig, state: &ModelState) -> Result<Grads> {
    cfg.validate()?;
    let mut out = Grads::new(state);
    for (id, g) in grads_h.iter() {
        let Some(g) = g else { continue };
        let sign = match state.param(id).group {
            ParamGroup::Log => cfg.lambda,
            ParamGroup::Gog => -cfg.lambda,
        };
        let mut scaled = g.clone();
        scaled.scale_in_place(sign);
        out.set(id, scaled);
    }
    Ok(out)
}

/// Adversarial objective evaluated on unlabeled target data. The gradients it
/// returns are fed through [`minimax_apply`], so implementations only provide
/// the raw loss gradient; the per-group signs come from the contract.
pub trait AdversarialLoss {
    fn name(&self) -> &'static str;
    /// Loss value and its gradients w.r.t. every parameter the batch touches.
    fn loss_and_grads(&self, model: &HigdaModel, unlabeled: &[&Tensor]) -> Result<(f64, Grads)>;
}

/// Minimax entropy: mean prediction entropy of the unlabeled batch.
pub struct MinimaxEntropy;

impl AdversarialLoss for MinimaxEntropy {
    fn name(&self) -> &'static str {
        "mme"
    }

    fn loss_and_grads(&self, model: &HigdaModel, unlabeled: &[&Tensor]) -> Result<(f64, Grads)> {
        let mut fwd = model.forward_batch(unlabeled)?;
        let h = fwd.batch_tape.mean_entropy(fwd.gog.probs)?;
        let value = fwd.batch_tape.value(h).item()?;
        let grads = fwd.backward_scalar(model, h)?;
        Ok((value, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::state::{ParamGroup, RunContext};

    fn gt(labels: &[NodeLabel]) -> Tensor {
        let n = labels.len();
        Tensor::from_fn(&[n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            match (labels[i].class(), labels[j].class()) {
                (Some(a), Some(b)) if a == b => 1.0,
                _ => 0.0,
            }
        })
    }

    #[test]
    fn node_loss_anchors() {
        // one-hot at the true class -> exactly 0
        let p = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = [NodeLabel::GroundTruth(0), NodeLabel::Pseudo(2)];
        assert_eq!(node_loss(&p, &labels).unwrap(), 0.0);

        // uniform over C=10 -> ln 10
        let u = Tensor::from_fn(&[4, 10], |_| 0.1);
        let l = vec![NodeLabel::GroundTruth(7); 4];
        assert!((node_loss(&u, &l).unwrap() - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn node_loss_matches_loop_oracle_and_rejects_unlabeled() {
        let mut ctx = RunContext::from_seed(3);
        let raw = ctx.uniform(&[5, 4], 1.0);
        // softmax by hand to get valid probabilities
        let mut p = Tensor::zeros(&[5, 4]);
        for r in 0..5 {
            let row = raw.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..4 {
                p.data_mut()[r * 4 + c] = (row[c] - mx).exp() / z;
            }
        }
        let labels: Vec<NodeLabel> =
            (0..5).map(|i| NodeLabel::GroundTruth(i % 4)).collect();
        let got = node_loss(&p, &labels).unwrap();
        let mut expect = 0.0;
        for (i, l) in labels.iter().enumerate() {
            expect -= p.data()[i * 4 + l.class().unwrap()].ln();
        }
        expect /= 5.0;
        assert!((got - expect).abs() < 1e-15);

        let bad = [NodeLabel::GroundTruth(0), NodeLabel::Unlabeled];
        let p2 = Tensor::from_fn(&[2, 4], |_| 0.25);
        assert!(matches!(node_loss(&p2, &bad), Err(HigdaError::Contract(_))));
    }

    #[test]
    fn edge_loss_cases() {
        let labels = [NodeLabel::GroundTruth(1), NodeLabel::GroundTruth(1)];
        let g = gt(&labels);
        // e=1, ahat=1-1e-7: loss ~ 1e-7
        let close = Tensor::from_fn(&[2, 2], |_| 1.0 - 1e-7);
        let l = edge_loss(&close, &g, &labels).unwrap();
        assert!(l > 0.0 && l < 1.5e-7);

        // e=0, ahat=0.5 -> ln 2 per pair
        let labels2 = [NodeLabel::GroundTruth(0), NodeLabel::GroundTruth(1)];
        let half = Tensor::from_fn(&[2, 2], |_| 0.5);
        let l2 = edge_loss(&half, &gt(&labels2), &labels2).unwrap();
        assert!((l2 - 2.0f64.ln()).abs() < 1e-12);

        // exact 0/1 scores are clamped, not NaN
        let hard = Tensor::from_fn(&[2, 2], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        assert!(edge_loss(&hard, &gt(&labels2), &labels2).unwrap().is_finite());
    }

    #[test]
    fn edge_loss_matches_double_loop_oracle() {
        let mut ctx = RunContext::from_seed(8);
        let n = 6;
        let labels: Vec<NodeLabel> = (0..n)
            .map(|i| {
                if i % 3 == 0 {
                    NodeLabel::Unlabeled
                } else if i % 3 == 1 {
                    NodeLabel::GroundTruth(i % 2)
                } else {
                    NodeLabel::Pseudo(i % 2)
                }
            })
            .collect();
        let mut ahat = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..=i {
                let v = 0.5 + 0.45 * ctx.uniform(&[1], 1.0).data()[0];
                ahat.data_mut()[i * n + j] = v;
                ahat.data_mut()[j * n + i] = v;
            }
        }
        let g = gt(&labels);
        let got = edge_loss(&ahat, &g, &labels).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            for j in 0..n {
                if i == j || labels[i].class().is_none() || labels[j].class().is_none() {
                    continue;
                }
                let a = ahat.data()[i * n + j];
                let e = g.data()[i * n + j];
                total += -e * a.ln() - (1.0 - e) * (1.0 - a).ln();
                count += 1;
            }
        }
        assert!((got - total / count as f64).abs() < 1e-14);
    }

    #[test]
    fn higda_loss_is_additive() {
        let labels = [NodeLabel::GroundTruth(0), NodeLabel::Pseudo(0)];
        let p = Tensor::from_vec(&[2, 2], vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let a = Tensor::from_fn(&[2, 2], |_| 0.7);
        let g = gt(&labels);
        let rep = higda_loss(&p, &a, &g, &labels).unwrap();
        let n = node_loss(&p, &labels).unwrap();
        let e = edge_loss(&a, &g, &labels).unwrap();
        assert_eq!(rep.total, n + e);
        assert!((rep.total - rep.node_loss - rep.edge_loss).abs() < 1e-12);

        // near-perfect predictions and affinities -> near-zero total
        let perfect_p = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let labels_same = [NodeLabel::GroundTruth(0), NodeLabel::GroundTruth(0)];
        let perfect_a = Tensor::from_fn(&[2, 2], |_| 1.0 - 1e-9);
        let rep2 =
            higda_loss(&perfect_p, &perfect_a, &gt(&labels_same), &labels_same).unwrap();
        assert!(rep2.total < 1e-6);
    }

    #[test]
    fn entropy_anchors_and_oracle() {
        let onehot = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy_loss(&onehot).unwrap(), 0.0);

        let uniform = Tensor::from_fn(&[3, 10], |_| 0.1);
        assert!((entropy_loss(&uniform).unwrap() - 10.0f64.ln()).abs() < 1e-12);

        let mut ctx = RunContext::from_seed(4);
        let raw = ctx.uniform(&[4, 5], 2.0);
        let mut p = Tensor::zeros(&[4, 5]);
        for r in 0..4 {
            let row = raw.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..5 {
                p.data_mut()[r * 5 + c] = row[c].exp() / z;
            }
        }
        let got = entropy_loss(&p).unwrap();
        let mut expect = 0.0;
        for &v in p.data() {
            expect -= v * v.ln();
        }
        assert!((got - expect / 4.0).abs() < 1e-14);
    }

    #[test]
    fn minimax_signs_per_group() {
        let mut state = ModelState::new();
        let a = state.register("log.p", ParamGroup::Log, Tensor::zeros(&[1])).unwrap();
        let b = state.register("gog.p", ParamGroup::Gog, Tensor::zeros(&[1])).unwrap();
        let mut gh = Grads::new(&state);
        gh.set(a, Tensor::from_vec(&[1], vec![2.0]).unwrap());
        gh.set(b, Tensor::from_vec(&[1], vec![2.0]).unwrap());

        let cfg = MinimaxConfig { lambda: 0.1, method: MinimaxMethod::Mme };
        let out = minimax_apply(&gh, &cfg, &state).unwrap();
        assert!((out.get(a).unwrap().data()[0] - 0.2).abs() < 1e-15);
        assert!((out.get(b).unwrap().data()[0] + 0.2).abs() < 1e-15);

        // lambda = 0 -> zero contribution
        let zero = minimax_apply(&gh, &MinimaxConfig { lambda: 0.0, method: MinimaxMethod::Mme }, &state)
            .unwrap();
        assert_eq!(zero.get(a).unwrap().data()[0], 0.0);

        // flipping the group flips the sign exactly
        let mut flipped = ModelState::new();
        let a2 = flipped.register("log.p", ParamGroup::Gog, Tensor::zeros(&[1])).unwrap();
        let b2 = flipped.register("gog.p", ParamGroup::Log, Tensor::zeros(&[1])).unwrap();
        let mut gh2 = Grads::new(&flipped);
        gh2.set(a2, Tensor::from_vec(&[1], vec![2.0]).unwrap());
        gh2.set(b2, Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let out2 = minimax_apply(&gh2, &cfg, &flipped).unwrap();
        assert_eq!(out2.get(a2).unwrap().data()[0], -out.get(a).unwrap().data()[0]);
        assert_eq!(out2.get(b2).unwrap().data()[0], -out.get(b).unwrap().data()[0]);
    }
}
