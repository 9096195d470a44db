//! Saliency evaluation: mean absolute error, threshold-swept F-measure and
//! E-measure with their 256-point curves, the structure measure, and
//! dataset-level reports.
//!
//! Degenerate cases are handled by explicit branches rather than epsilons in
//! denominators, so the anchor values (perfect prediction, empty ground
//! truth, and so on) come out exact: an epsilon would smear every one of
//! them by a few ulps and force sloppy tests.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::consensus::adaptive_threshold;
use crate::dataset::{load_gray_png, DatasetManifest};
use crate::{CoreError, Result};

/// Number of uniform binarization thresholds `t_i = i / 255`.
pub const NUM_THRESHOLDS: usize = 256;

/// F-measure beta squared; weights precision over recall.
pub const F_BETA_SQ: f64 = 0.3;

fn threshold_value(i: usize) -> f64 {
    i as f64 / 255.0
}

fn mean_slice(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_shapes(p: &Array2<f64>, y: &Array2<f64>, what: &str) {
    assert_eq!(p.dim(), y.dim(), "{what}: prediction and GT sizes differ");
    assert!(!p.is_empty(), "{what}: empty maps");
}

/// Mean absolute error between a gray prediction and the ground truth.
pub fn mae(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    check_shapes(p, y, "mae");
    let mut acc = 0.0;
    for (&pv, &yv) in p.iter().zip(y.iter()) {
        acc += (pv - yv).abs();
    }
    acc / p.len() as f64
}

fn f_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    // No true positives means precision or recall is 0 (or undefined);
    // either way the F-score is 0. With tp > 0 the denominator is positive.
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    (1.0 + F_BETA_SQ) * precision * recall / (F_BETA_SQ * precision + recall)
}

fn confusion_counts(p: &Array2<f64>, yb: &[bool], t: f64) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&pv, &gt) in p.iter().zip(yb) {
        match (pv > t, gt) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

/// F-measure swept over the 256 uniform thresholds; returns the mean over
/// thresholds and the full curve. Binarization is strict (`p > t`), so the
/// final threshold t = 1 always yields an empty prediction.
pub fn f_measure(p: &Array2<f64>, y: &Array2<f64>) -> (f64, Vec<f64>) {
    check_shapes(p, y, "f_measure");
    let yb: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
    let curve: Vec<f64> = (0..NUM_THRESHOLDS)
        .map(|i| {
            let (tp, fp, fn_) = confusion_counts(p, &yb, threshold_value(i));
            f_from_counts(tp, fp, fn_)
        })
        .collect();
    (mean_slice(&curve), curve)
}

/// F-measure at the adaptive threshold (twice the prediction mean), the
/// same binarization the consensus stage uses.
pub fn f_measure_adaptive(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    check_shapes(p, y, "f_measure_adaptive");
    let yb: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
    let b = adaptive_threshold(p);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&bv, &gt) in b.iter().zip(&yb) {
        match (bv == 1.0, gt) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    f_from_counts(tp, fp, fn_)
}

/// Alignment-based E-measure for one binarized prediction against a binary
/// ground truth, both given as flat slices of 0/1 values.
fn e_for_binary(b: &[f64], yb: &[f64], ones_in_y: usize) -> f64 {
    let n = yb.len();
    // Degenerate ground truths have no structure to align with; the measure
    // falls back to rewarding emptiness or fullness of the prediction.
    if ones_in_y == 0 {
        return 1.0 - mean_slice(b);
    }
    if ones_in_y == n {
        return mean_slice(b);
    }
    let my = mean_slice(yb);
    let mb = mean_slice(b);
    let mut acc = 0.0;
    for (&yv, &bv) in yb.iter().zip(b) {
        let a = yv - my;
        let c = bv - mb;
        let den = a * a + c * c;
        // Both maps sitting exactly at their means is perfect alignment.
        let xi = if den == 0.0 { 1.0 } else { 2.0 * a * c / den };
        let enhanced = (xi + 1.0) * (xi + 1.0) / 4.0;
        acc += enhanced;
    }
    acc / n as f64
}

/// E-measure swept over the 256 uniform thresholds; returns the mean over
/// thresholds and the full curve.
pub fn e_measure(p: &Array2<f64>, y: &Array2<f64>) -> (f64, Vec<f64>) {
    check_shapes(p, y, "e_measure");
    let yb: Vec<f64> = y.iter().map(|&v| (v > 0.5) as u8 as f64).collect();
    let ones_in_y = yb.iter().filter(|&&v| v == 1.0).count();
    let pv: Vec<f64> = p.iter().copied().collect();
    let curve: Vec<f64> = (0..NUM_THRESHOLDS)
        .map(|i| {
            let t = threshold_value(i);
            let b: Vec<f64> = pv.iter().map(|&v| (v > t) as u8 as f64).collect();
            e_for_binary(&b, &yb, ones_in_y)
        })
        .collect();
    (mean_slice(&curve), curve)
}

/// Object-level score `2 m / (m^2 + 1 + 2 s)` from a region's mean and
/// sample standard deviation. The denominator is at least 1.
fn object_score(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let m = mean_slice(vals);
    let sd = if vals.len() < 2 {
        0.0
    } else {
        let var = vals.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
        var.sqrt()
    };
    2.0 * m / (m * m + 1.0 + 2.0 * sd)
}

/// Structural-similarity score of one block from means, sample variances,
/// and covariance. Fully degenerate blocks (no signal in either map) count
/// as a perfect match; signal in exactly one map counts as a total miss.
fn block_score(pvals: &[f64], yvals: &[f64]) -> f64 {
    let nb = pvals.len();
    let mx = mean_slice(pvals);
    let my = mean_slice(yvals);
    let (mut vx, mut vy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in pvals.iter().zip(yvals) {
        let dx = a - mx;
        let dy = b - my;
        vx += dx * dx;
        vy += dy * dy;
        sxy += dx * dy;
    }
    if nb > 1 {
        let denom = (nb - 1) as f64;
        vx /= denom;
        vy /= denom;
        sxy /= denom;
    } else {
        vx = 0.0;
        vy = 0.0;
        sxy = 0.0;
    }
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure: mean of an object-level and a region-level term,
/// clamped to [0, 1]. The region term splits both maps into four blocks at
/// the ground-truth centroid and area-weights per-block structural scores.
/// Degenerate ground truths reduce to `1 - mean(p)` (all background) or
/// `mean(p)` (all foreground).
pub fn s_measure(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    check_shapes(p, y, "s_measure");
    let (h, w) = y.dim();
    let n = h * w;
    let yb = y.mapv(|v| (v > 0.5) as u8 as f64);
    let nfg = yb.iter().filter(|&&v| v == 1.0).count();
    let pv: Vec<f64> = p.iter().copied().collect();
    if nfg == 0 {
        return 1.0 - mean_slice(&pv);
    }
    if nfg == n {
        return mean_slice(&pv);
    }

    // Object term: foreground on p, background on 1 - p, weighted by the
    // ground-truth foreground fraction. Grouping as a single division keeps
    // the perfect-prediction case exactly 1.
    let mut fg = Vec::with_capacity(nfg);
    let mut bg = Vec::with_capacity(n - nfg);
    for (&pvv, &yvv) in p.iter().zip(yb.iter()) {
        if yvv == 1.0 {
            fg.push(pvv);
        } else {
            bg.push(1.0 - pvv);
        }
    }
    let s_object =
        (nfg as f64 * object_score(&fg) + (n - nfg) as f64 * object_score(&bg)) / n as f64;

    // Region term: split at the rounded foreground centroid.
    let (mut sy, mut sx) = (0.0, 0.0);
    for ((r, c), &v) in yb.indexed_iter() {
        if v == 1.0 {
            sy += r as f64;
            sx += c as f64;
        }
    }
    let cy = (sy / nfg as f64).round() as usize;
    let cx = (sx / nfg as f64).round() as usize;
    let row_split = (cy + 1).min(h);
    let col_split = (cx + 1).min(w);
    let mut acc = 0.0;
    for (r0, r1) in [(0, row_split), (row_split, h)] {
        for (c0, c1) in [(0, col_split), (col_split, w)] {
            let area = (r1 - r0) * (c1 - c0);
            if area == 0 {
                continue;
            }
            let mut pb = Vec::with_capacity(area);
            let mut yv = Vec::with_capacity(area);
            for r in r0..r1 {
                for c in c0..c1 {
                    pb.push(p[[r, c]]);
                    yv.push(yb[[r, c]]);
                }
            }
            acc += area as f64 * block_score(&pb, &yv);
        }
    }
    let s_region = acc / n as f64;

    (0.5 * s_object + 0.5 * s_region).clamp(0.0, 1.0)
}

/// The four measures (plus the adaptive-threshold F) for one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mae: f64,
    pub f_mean: f64,
    pub f_adaptive: f64,
    pub e_mean: f64,
    pub s: f64,
}

/// Evaluate one prediction, returning the scalar metrics and the two
/// per-threshold curves.
pub fn evaluate_image(p: &Array2<f64>, y: &Array2<f64>) -> (ImageMetrics, Vec<f64>, Vec<f64>) {
    let (f_mean, f_curve) = f_measure(p, y);
    let (e_mean, e_curve) = e_measure(p, y);
    let metrics = ImageMetrics {
        mae: mae(p, y),
        f_mean,
        f_adaptive: f_measure_adaptive(p, y),
        e_mean,
        s: s_measure(p, y),
    };
    (metrics, f_curve, e_curve)
}

/// Per-image and dataset-level evaluation results, with the dataset-mean
/// F/E curves for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: BTreeMap<String, ImageMetrics>,
    pub dataset_mean: ImageMetrics,
    pub f_curve: Vec<f64>,
    pub e_curve: Vec<f64>,
}

impl MetricReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| CoreError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(serde_json::from_str(&body)?)
    }

    /// Curve data as CSV (`index,threshold,f,e`), one row per threshold.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("index,threshold,f,e\n");
        for i in 0..self.f_curve.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i,
                threshold_value(i),
                self.f_curve[i],
                self.e_curve[i]
            ));
        }
        out
    }
}

/// Evaluate a directory of predictions (`{id}.png`, 8-bit gray) against the
/// first annotation of every manifest entry. Dataset means are plain
/// arithmetic means over images in manifest order.
pub fn evaluate_dataset(pred_dir: &Path, manifest: &DatasetManifest) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(CoreError::Invalid(
            "evaluate_dataset on an empty manifest".into(),
        ));
    }
    let eval_one = |entry_index: usize| -> Result<(String, ImageMetrics, Vec<f64>, Vec<f64>)> {
        let e = &manifest.entries[entry_index];
        let pred_path = pred_dir.join(format!("{}.png", e.id));
        if !pred_path.exists() {
            return Err(CoreError::Invalid(format!(
                "missing prediction for id {}: expected {}",
                e.id,
                pred_path.display()
            )));
        }
        let p = load_gray_png(&pred_path)?;
        let y = load_gray_png(&manifest.root.join(&e.annotation_paths[0]))?;
        if p.dim() != y.dim() {
            return Err(CoreError::Shape {
                context: format!("prediction for id {}", e.id),
                expected: format!("{:?}", y.dim()),
                actual: format!("{:?}", p.dim()),
            });
        }
        let (m, f_curve, e_curve) = evaluate_image(&p, &y);
        Ok((e.id.clone(), m, f_curve, e_curve))
    };

    #[cfg(feature = "parallel")]
    let results: Result<Vec<_>> = {
        use rayon::prelude::*;
        (0..manifest.len()).into_par_iter().map(eval_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Result<Vec<_>> = (0..manifest.len()).map(eval_one).collect();
    let results = results?;

    let n = results.len() as f64;
    let mut mean = ImageMetrics {
        mae: 0.0,
        f_mean: 0.0,
        f_adaptive: 0.0,
        e_mean: 0.0,
        s: 0.0,
    };
    let mut f_curve = vec![0.0; NUM_THRESHOLDS];
    let mut e_curve = vec![0.0; NUM_THRESHOLDS];
    let mut per_image = BTreeMap::new();
    for (id, m, fc, ec) in results {
        mean.mae += m.mae;
        mean.f_mean += m.f_mean;
        mean.f_adaptive += m.f_adaptive;
        mean.e_mean += m.e_mean;
        mean.s += m.s;
        for i in 0..NUM_THRESHOLDS {
            f_curve[i] += fc[i];
            e_curve[i] += ec[i];
        }
        if per_image.insert(id.clone(), m).is_some() {
            return Err(CoreError::Invalid(format!("duplicate id {id}")));
        }
    }
    mean.mae /= n;
    mean.f_mean /= n;
    mean.f_adaptive /= n;
    mean.e_mean /= n;
    mean.s /= n;
    for v in f_curve.iter_mut().chain(e_curve.iter_mut()) {
        *v /= n;
    }
    Ok(MetricReport {
        per_image,
        dataset_mean: mean,
        f_curve,
        e_curve,
    })
}
