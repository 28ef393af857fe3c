//! Synthetic two-domain dataset generation, SSDA split construction, and a
//! directory-of-PNGs loader for real data.

pub mod shapes;

use crate::error::{HigdaError, Result};
use crate::numerics::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub use shapes::{RenderStyle, SampleLatents, StrokeStyle};

/// Specification of the synthetic benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_domain: usize,
    pub image_size: usize,
    /// Covariate shift applied to the target domain.
    pub shift: RenderStyle,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            per_domain: 500,
            image_size: 32,
            shift: RenderStyle {
                hue_rotation: 120.0,
                texture_noise: 0.12,
                stroke_style: StrokeStyle::Outline,
            },
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(HigdaError::Config("classes must be >= 2".into()));
        }
        if self.classes > 10 {
            return Err(HigdaError::Config("the shape family provides at most 10 classes".into()));
        }
        if self.per_domain < self.classes * 10 {
            return Err(HigdaError::Config(format!(
                "per_domain {} must be >= classes*10 = {}",
                self.per_domain,
                self.classes * 10
            )));
        }
        if self.image_size < 8 {
            return Err(HigdaError::Config("image_size must be >= 8".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Reference to one sample inside a (source, target) dataset pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub domain: Domain,
    pub index: usize,
}

impl SampleRef {
    pub fn source(index: usize) -> Self {
        SampleRef { domain: Domain::Source, index }
    }

    pub fn target(index: usize) -> Self {
        SampleRef { domain: Domain::Target, index }
    }

    pub fn image<'a>(&self, source: &'a Dataset, target: &'a Dataset) -> &'a Tensor {
        match self.domain {
            Domain::Source => &source.images[self.index],
            Domain::Target => &target.images[self.index],
        }
    }
}

/// An immutable labeled image set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Generate the two domains: source rendered with canonical style, target
/// with the spec's shift. Fully seeded; identical specs give identical data.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let source_style = RenderStyle::default();
    let make = |domain: u64, prefix: &str, style: &RenderStyle| -> Dataset {
        let images: Vec<Tensor> = (0..spec.per_domain)
            .into_par_iter()
            .map(|i| {
                let l = SampleLatents::draw(spec.seed, domain, i, spec.classes, spec.image_size);
                shapes::render(&l, style, spec.image_size)
            })
            .collect();
        let labels: Vec<usize> = (0..spec.per_domain).map(|i| i % spec.classes).collect();
        let ids = (0..spec.per_domain).map(|i| format!("{prefix}-{i:05}")).collect();
        Dataset { images, labels, ids, classes: spec.classes }
    };
    Ok((make(0, "src", &source_style), make(1, "tgt", &spec.shift)))
}

/// SSDA splits: all source samples labeled, `n_shot` labeled target samples
/// per class, 20% of the target held out for test, the rest unlabeled.
/// Fields hold indices into the source/target datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsdaSplits {
    pub source_labeled: Vec<usize>,
    pub target_labeled: Vec<usize>,
    pub target_unlabeled: Vec<usize>,
    pub target_test: Vec<usize>,
}

pub fn make_splits(
    source: &Dataset,
    target: &Dataset,
    n_shot: usize,
    seed: u64,
) -> Result<SsdaSplits> {
    if n_shot == 0 {
        return Err(HigdaError::Config("n_shot must be >= 1".into()));
    }
    let classes = target.classes;
    let n_t = n_shot * classes;
    if source.len() < 10 * n_t {
        return Err(HigdaError::Data(format!(
            "need N_s >= 10*N_t: source {} vs 10*{}",
            source.len(),
            n_t
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target_labeled = Vec::new();
    let mut target_unlabeled = Vec::new();
    let mut target_test = Vec::new();
    for class in 0..classes {
        let mut idx: Vec<usize> =
            (0..target.len()).filter(|&i| target.labels[i] == class).collect();
        let test_quota = idx.len().div_ceil(5); // 20% per class
        if idx.len() < n_shot + test_quota || test_quota == 0 {
            return Err(HigdaError::Data(format!(
                "class {class} has {} target samples, needs {} labeled + {} test",
                idx.len(),
                n_shot,
                test_quota
            )));
        }
        idx.shuffle(&mut rng);
        target_labeled.extend_from_slice(&idx[..n_shot]);
        target_test.extend_from_slice(&idx[n_shot..n_shot + test_quota]);
        target_unlabeled.extend_from_slice(&idx[n_shot + test_quota..]);
    }
    target_labeled.sort_unstable();
    target_unlabeled.sort_unstable();
    target_test.sort_unstable();
    Ok(SsdaSplits {
        source_labeled: (0..source.len()).collect(),
        target_labeled,
        target_unlabeled,
        target_test,
    })
}

/// Load `root/<class_name>/*.png`, labels assigned by sorted directory
/// order, images bilinearly resized to `image_size` and scaled to `[0, 1]`.
/// Undecodable files are skipped with a warning; an empty class directory is
/// a data error.
pub fn load_image_dir(root: &Path, image_size: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(HigdaError::Data(format!("no class directories under {}", root.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        let mut loaded = 0usize;
        for f in files {
            match decode_png_file(&f, image_size) {
                Ok(t) => {
                    images.push(t);
                    labels.push(label);
                    ids.push(format!(
                        "{}/{}",
                        dir.file_name().unwrap_or_default().to_string_lossy(),
                        f.file_name().unwrap_or_default().to_string_lossy()
                    ));
                    loaded += 1;
                }
                Err(e) => log::warn!("skipping {}: {e}", f.display()),
            }
        }
        if loaded == 0 {
            return Err(HigdaError::Data(format!(
                "class directory {} has no decodable png",
                dir.display()
            )));
        }
    }
    let classes = class_dirs.len();
    Ok(Dataset { images, labels, ids, classes })
}

fn decode_png_file(path: &Path, image_size: usize) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_png_bytes(&bytes, image_size)
}

/// Decode PNG bytes to a resized `image_size × image_size × 3` tensor.
pub fn decode_png_bytes(bytes: &[u8], image_size: usize) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| HigdaError::Data(format!("png decode: {e}")))?;
    let resized = image::imageops::resize(
        &img.to_rgb8(),
        image_size as u32,
        image_size as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut t = Tensor::zeros(&[image_size, image_size, 3]);
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            t.data_mut()[i * 3 + c] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Quantize to 8-bit and write a PNG (inspection/materialization path).
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let shape = img.shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (img.data()[i * 3 + c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| HigdaError::Data(format!("png encode: {e}")))?;
    Ok(())
}

// ── manifest ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: String,
    pub split: String,
    pub label: Option<usize>,
    pub provenance: String,
}

/// Dataset manifest written next to generated data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn build(
        spec: &SyntheticSpec,
        source: &Dataset,
        target: &Dataset,
        splits: &SsdaSplits,
    ) -> Self {
        let mut samples = Vec::with_capacity(source.len() + target.len());
        for &i in &splits.source_labeled {
            samples.push(ManifestEntry {
                id: source.ids[i].clone(),
                domain: "source".into(),
                split: "source_labeled".into(),
                label: Some(source.labels[i]),
                provenance: "ground_truth".into(),
            });
        }
        let mut push_target = |idxs: &[usize], split: &str, labeled: bool| {
            for &i in idxs {
                samples.push(ManifestEntry {
                    id: target.ids[i].clone(),
                    domain: "target".into(),
                    split: split.into(),
                    label: if labeled { Some(target.labels[i]) } else { None },
                    provenance: if labeled { "ground_truth".into() } else { "none".into() },
                });
            }
        };
        push_target(&splits.target_labeled, "target_labeled", true);
        push_target(&splits.target_unlabeled, "target_unlabeled", false);
        push_target(&splits.target_test, "target_test", true);
        DatasetManifest {
            classes: spec.classes,
            image_size: spec.image_size,
            seed: spec.seed,
            samples,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serializable"))?;
        Ok(())
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| HigdaError::Data(format!("manifest: {e}")))
    }
}
