//! Graph active learning: episodic pseudo-label generation, labeled-pool
//! update, and the pairwise connection rule over mixed label provenance.

use crate::data::{Dataset, SampleRef};
use crate::error::{HigdaError, Result};
use crate::global_graph::NodeLabel;
use crate::model::HigdaModel;
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GalConfig {
    /// Confidence threshold for accepting a pseudo-label (inclusive).
    pub tau: f64,
    pub episodes: usize,
    pub steps_per_episode: usize,
}

impl Default for GalConfig {
    fn default() -> Self {
        GalConfig { tau: 0.95, episodes: 10, steps_per_episode: 100 }
    }
}

impl GalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(HigdaError::Config("tau must be in (0, 1)".into()));
        }
        if self.steps_per_episode == 0 {
            return Err(HigdaError::Config("steps_per_episode must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LabeledSample {
    pub sample: SampleRef,
    pub label: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PseudoLabel {
    pub sample: SampleRef,
    pub label: usize,
    pub confidence: f64,
}

/// The evolving labeled set: an immutable ground-truth base plus a pseudo
/// set that is fully regenerated (not accumulated) each episode.
#[derive(Debug, Clone)]
pub struct LabeledPool {
    base: Vec<LabeledSample>,
    pseudo: Vec<PseudoLabel>,
}

impl LabeledPool {
    pub fn new(base: Vec<LabeledSample>) -> Self {
        LabeledPool { base, pseudo: Vec::new() }
    }

    pub fn base(&self) -> &[LabeledSample] {
        &self.base
    }

    pub fn pseudo(&self) -> &[PseudoLabel] {
        &self.pseudo
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.pseudo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unified view: base entries first, pseudo entries after.
    pub fn entry(&self, i: usize) -> (SampleRef, NodeLabel) {
        if i < self.base.len() {
            (self.base[i].sample, NodeLabel::GroundTruth(self.base[i].label))
        } else {
            let p = &self.pseudo[i - self.base.len()];
            (p.sample, NodeLabel::Pseudo(p.label))
        }
    }
}

/// Accept `argmax_c p_c` for every row whose max probability reaches `tau`
/// (inclusive); argmax ties resolve to the lowest class index.
pub fn select_pseudo_labels(probs: &Tensor, refs: &[SampleRef], tau: f64) -> Result<Vec<PseudoLabel>> {
    let (n, c) = probs.dims2()?;
    if refs.len() != n {
        return Err(HigdaError::Contract(format!("{} rows, {} refs", n, refs.len())));
    }
    let mut out = Vec::new();
    for (r, &sample) in refs.iter().enumerate() {
        let row = probs.row(r);
        let mut best = 0usize;
        for k in 1..c {
            if row[k] > row[best] {
                best = k;
            }
        }
        if row[best] >= tau {
            out.push(PseudoLabel { sample, label: best, confidence: row[best] });
        }
    }
    Ok(out)
}

/// Step 1 of the episode loop: evaluation-mode inference over the unlabeled
/// target set in mini-batches with learned affinities, thresholded at `tau`.
pub fn generate_pseudo_labels(
    model: &HigdaModel,
    target: &Dataset,
    unlabeled: &[usize],
    tau: f64,
    batch_size: usize,
) -> Result<Vec<PseudoLabel>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(HigdaError::Config("tau must be in (0, 1)".into()));
    }
    let mut out = Vec::new();
    for chunk in unlabeled.chunks(batch_size.max(1)) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &target.images[i]).collect();
        let probs = model.predict_probs(&imgs)?;
        let refs: Vec<SampleRef> = chunk.iter().map(|&i| SampleRef::target(i)).collect();
        out.extend(select_pseudo_labels(&probs, &refs, tau)?);
    }
    Ok(out)
}

/// Step 2: replace the pool's pseudo set with this episode's set. Base
/// entries are never touched; pseudo duplicates of base samples are dropped.
pub fn update_pool(pool: &mut LabeledPool, pseudo: Vec<PseudoLabel>) {
    let base_ids: std::collections::HashSet<SampleRef> =
        pool.base.iter().map(|s| s.sample).collect();
    pool.pseudo = pseudo.into_iter().filter(|p| !base_ids.contains(&p.sample)).collect();
}

/// The pairwise connection rule over mixed provenance: an edge exists iff
/// the two classes agree, whether each side is ground truth or pseudo.
/// Unlabeled inputs are excluded upstream and rejected here.
pub fn mixed_edge_rule(a: &NodeLabel, b: &NodeLabel) -> Result<bool> {
    match (a.class(), b.class()) {
        (Some(ca), Some(cb)) => Ok(ca == cb),
        _ => Err(HigdaError::Contract("mixed_edge_rule on unlabeled input".into())),
    }
}

/// Ground-truth edge matrix over a batch: diagonal 1, labeled pairs by the
/// connection rule, pairs touching an unlabeled node 0 (masked out by the
/// loss anyway).
pub fn build_gt_edges(labels: &[NodeLabel]) -> Result<Tensor> {
    let n = labels.len();
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        m.data_mut()[i * n + i] = 1.0;
        for j in 0..n {
            if i == j || labels[i].class().is_none() || labels[j].class().is_none() {
                continue;
            }
            m.data_mut()[i * n + j] = if mixed_edge_rule(&labels[i], &labels[j])? { 1.0 } else { 0.0 };
        }
    }
    Ok(m)
}

/// Per-episode record for the episode log.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub pseudo_count: usize,
    /// Fraction of accepted pseudo-labels matching ground truth, when known.
    pub pseudo_accuracy: Option<f64>,
    pub target_accuracy: f64,
}

/// What the episode loop needs from the surrounding training machinery.
pub trait GalDriver {
    fn model(&self) -> &HigdaModel;
    /// One episode's fine-tuning budget on the current pool.
    fn fine_tune(&mut self, pool: &LabeledPool, episode: usize) -> Result<()>;
    /// Target-test accuracy of the current model.
    fn eval_target(&mut self) -> Result<f64>;
}

/// The episode loop. Expects a model already pretrained on the base pool;
/// `episodes = 0` leaves the model untouched.
pub fn run_gal<D: GalDriver>(
    driver: &mut D,
    target: &Dataset,
    unlabeled: &[usize],
    pool: &mut LabeledPool,
    cfg: &GalConfig,
    batch_size: usize,
) -> Result<Vec<EpisodeRecord>> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.episodes);
    for episode in 1..=cfg.episodes {
        let pseudo =
            generate_pseudo_labels(driver.model(), target, unlabeled, cfg.tau, batch_size)?;
        let pseudo_accuracy = pseudo_accuracy(&pseudo, target);
        update_pool(pool, pseudo);
        driver.fine_tune(pool, episode)?;
        let target_accuracy = driver.eval_target()?;
        records.push(EpisodeRecord {
            episode,
            pseudo_count: pool.pseudo.len(),
            pseudo_accuracy,
            target_accuracy,
        });
    }
    Ok(records)
}

/// Episode log CSV: `episode,pseudo_count,pseudo_accuracy_if_known,target_accuracy`.
pub fn write_episode_csv(path: &std::path::Path, records: &[EpisodeRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "episode,pseudo_count,pseudo_accuracy_if_known,target_accuracy")?;
    for r in records {
        let acc = r.pseudo_accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{}", r.episode, r.pseudo_count, acc, r.target_accuracy)?;
    }
    Ok(())
}

/// Pseudo-label dump CSV: `sample_id,pseudo_label,confidence`.
pub fn write_pseudo_csv(
    path: &std::path::Path,
    pseudo: &[PseudoLabel],
    target: &Dataset,
) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "sample_id,pseudo_label,confidence")?;
    for p in pseudo {
        writeln!(f, "{},{},{}", target.ids[p.sample.index], p.label, p.confidence)?;
    }
    Ok(())
}

/// Accuracy of a pseudo set against known ground truth; `None` when empty.
pub fn pseudo_accuracy(pseudo: &[PseudoLabel], target: &Dataset) -> Option<f64> {
    if pseudo.is_empty() {
        return None;
    }
    let correct = pseudo
        .iter()
        .filter(|p| target.labels[p.sample.index] == p.label)
        .count();
    Some(correct as f64 / pseudo.len() as f64)
}
