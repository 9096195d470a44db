//! Multi-annotation training data ("augmented ground truth"): iteratively
//! hide the currently salient region with the dataset-mean color and
//! re-query a saliency oracle for what remains, producing one extra
//! annotation per round.
//!
//! The external saliency model is abstracted behind [`SaliencyOracle`] with
//! three backends: the synthetic scene-graph ranking (exact, for generated
//! data), precomputed prediction files, or a trained model from this
//! workspace wrapped in a closure.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::consensus::adaptive_threshold;
use crate::dataset::{
    load_gray_png, save_gray_png, save_rgb_png, DatasetManifest, ManifestEntry, RgbdSample,
};
use crate::{CoreError, Result};

/// Inference callback for the trained-model oracle backend: maps an RGB
/// image and its depth map to a gray saliency map.
pub type ModelPredictFn = dyn Fn(&Array3<f64>, &Array2<f64>) -> Result<Array2<f64>> + Send + Sync;

/// Source of saliency predictions during augmentation.
pub enum SaliencyOracle {
    /// Exact ranking oracle for synthetic scenes: returns the visible mask
    /// of the highest-ranked object not yet hidden, using the sample's
    /// ranked object masks. An object counts as hidden once a majority of
    /// its pixels equal the hide color exactly.
    SyntheticRank,
    /// Precomputed prediction files `{id}_{round}.png` in a directory.
    FilePredictions { dir: PathBuf },
    /// A trained model from this workspace (or any callable stand-in).
    TrainedModel(Box<ModelPredictFn>),
}

impl std::fmt::Debug for SaliencyOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SaliencyOracle::SyntheticRank => f.write_str("SyntheticRank"),
            SaliencyOracle::FilePredictions { dir } => {
                f.debug_struct("FilePredictions").field("dir", dir).finish()
            }
            SaliencyOracle::TrainedModel(_) => f.write_str("TrainedModel(..)"),
        }
    }
}

impl SaliencyOracle {
    /// Gray saliency map for the current (possibly partially hidden) image.
    fn predict(
        &self,
        sample: &RgbdSample,
        round: usize,
        current_rgb: &Array3<f64>,
        mean_rgb: [f64; 3],
    ) -> Result<Array2<f64>> {
        match self {
            SaliencyOracle::SyntheticRank => {
                let masks = sample.object_masks.as_ref().ok_or_else(|| {
                    CoreError::Invalid(format!(
                        "sample {} has no object masks for the ranking oracle",
                        sample.id
                    ))
                })?;
                let (_, h, w) = current_rgb.dim();
                for mask in masks {
                    let mut total = 0usize;
                    let mut visible = 0usize;
                    for y in 0..h {
                        for x in 0..w {
                            if mask[[y, x]] == 1.0 {
                                total += 1;
                                let hidden = (0..3)
                                    .all(|c| current_rgb[[c, y, x]] == mean_rgb[c]);
                                if !hidden {
                                    visible += 1;
                                }
                            }
                        }
                    }
                    if total > 0 && 2 * visible > total {
                        return Ok(mask.clone());
                    }
                }
                Ok(Array2::zeros((h, w)))
            }
            SaliencyOracle::FilePredictions { dir } => {
                load_gray_png(&dir.join(format!("{}_{round}.png", sample.id)))
            }
            SaliencyOracle::TrainedModel(predict) => predict(current_rgb, &sample.depth),
        }
    }
}

/// A sample with its hiding history and the full annotation set.
#[derive(Clone, Debug)]
pub struct AugmentedSample {
    pub base: RgbdSample,
    /// Image state after each hiding step; `hidden_rgbs[i]` has the first
    /// `i + 1` annotations' regions replaced by the mean color.
    pub hidden_rgbs: Vec<Array3<f64>>,
    /// Provided ground truth first, then one binarized oracle output per
    /// round; length is rounds + 1.
    pub annotations: Vec<Array2<f64>>,
}

/// Replace the masked region with the dataset-mean color, exactly.
pub fn hide_region(
    rgb: &Array3<f64>,
    mask: &Array2<f64>,
    mean_rgb: [f64; 3],
) -> Result<Array3<f64>> {
    let (c, h, w) = rgb.dim();
    if c != 3 || mask.dim() != (h, w) {
        return Err(CoreError::Shape {
            context: "hide_region".into(),
            expected: format!("mask {h}x{w} over a 3-channel image"),
            actual: format!("mask {:?}, image {:?}", mask.dim(), rgb.dim()),
        });
    }
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CoreError::Invalid("hide_region mask is not binary".into()));
    }
    let mut out = rgb.clone();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 1.0 {
                for ch in 0..3 {
                    out[[ch, y, x]] = mean_rgb[ch];
                }
            }
        }
    }
    Ok(out)
}

/// Build the augmented annotation set: hide the ground-truth region, query
/// the oracle, binarize its answer into a new annotation, hide that region
/// too, and repeat. Returns the provided ground truth plus `rounds`
/// generated annotations.
pub fn augment(
    sample: &RgbdSample,
    mean_rgb: [f64; 3],
    oracle: &SaliencyOracle,
    rounds: usize,
) -> Result<AugmentedSample> {
    sample.validate()?;
    let gt = sample.gt().clone();
    let mut annotations = vec![gt];
    let mut hidden_rgbs = Vec::with_capacity(rounds);
    let mut current = sample.rgb.clone();
    for round in 1..=rounds {
        let mask = annotations
            .last()
            .expect("at least the ground truth")
            .mapv(|v| (v > 0.5) as u8 as f64);
        current = hide_region(&current, &mask, mean_rgb)?;
        hidden_rgbs.push(current.clone());
        let pred = oracle
            .predict(sample, round, &current, mean_rgb)
            .map_err(|e| {
                CoreError::Invalid(format!(
                    "saliency oracle failed at round {round} for sample {}: {e}",
                    sample.id
                ))
            })?;
        if pred.dim() != mask.dim() {
            return Err(CoreError::Shape {
                context: format!("oracle output at round {round}"),
                expected: format!("{:?}", mask.dim()),
                actual: format!("{:?}", pred.dim()),
            });
        }
        annotations.push(adaptive_threshold(&pred));
    }
    Ok(AugmentedSample {
        base: sample.clone(),
        hidden_rgbs,
        annotations,
    })
}

/// Augment every sample of a manifest and write a self-contained copy under
/// `out_root` whose entries carry the full annotation set.
pub fn augment_manifest(
    manifest: &DatasetManifest,
    oracle: &SaliencyOracle,
    rounds: usize,
    out_root: &Path,
) -> Result<DatasetManifest> {
    for sub in ["rgb", "depth", "gt", "clean", "masks"] {
        std::fs::create_dir_all(out_root.join(sub))
            .map_err(|e| CoreError::io(out_root.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let sample = manifest.load_sample(i)?;
        let auged = augment(&sample, manifest.mean_rgb, oracle, rounds)?;
        let id = &sample.id;

        let rgb_path = PathBuf::from(format!("rgb/{id}.png"));
        save_rgb_png(&out_root.join(&rgb_path), &sample.rgb)?;
        let depth_path = PathBuf::from(format!("depth/{id}.png"));
        save_gray_png(&out_root.join(&depth_path), &sample.depth)?;
        let mut annotation_paths = Vec::with_capacity(auged.annotations.len());
        for (a, ann) in auged.annotations.iter().enumerate() {
            let p = PathBuf::from(format!("gt/{id}_{a}.png"));
            save_gray_png(&out_root.join(&p), ann)?;
            annotation_paths.push(p);
        }
        let clean_depth_path = match &sample.clean_depth {
            Some(c) => {
                let p = PathBuf::from(format!("clean/{id}.png"));
                save_gray_png(&out_root.join(&p), c)?;
                Some(p)
            }
            None => None,
        };
        let object_mask_paths = match &sample.object_masks {
            Some(ms) => {
                let mut ps = Vec::with_capacity(ms.len());
                for (k, m) in ms.iter().enumerate() {
                    let p = PathBuf::from(format!("masks/{id}_{k}.png"));
                    save_gray_png(&out_root.join(&p), m)?;
                    ps.push(p);
                }
                Some(ps)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: id.clone(),
            rgb_path,
            depth_path,
            annotation_paths,
            clean_depth_path,
            object_mask_paths,
        });
    }
    let out = DatasetManifest {
        root: out_root.to_path_buf(),
        entries,
        split: manifest.split,
        mean_rgb: manifest.mean_rgb,
    };
    out.save(&out_root.join("manifest.jsonl"))?;
    Ok(out)
}
