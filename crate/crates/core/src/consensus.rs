//! Test-time saliency consensus: adaptive thresholding of each sampled
//! prediction, per-pixel majority voting over the binarized maps, and a gray
//! consensus map weighting the agreeing predictions by the agreement
//! fraction.
//!
//! The gray value at a foreground-majority pixel is
//! `(agree / C) * mean(gray values of the agreeing predictions)`; at a
//! background-majority pixel it is 0. Even-split votes break to background,
//! so a pixel is salient only when a strict majority says so.

use crate::{CoreError, Result};
use ndarray::Array2;

/// A batch of sampled predictions together with their consensus.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    /// The C gray input maps, values in [0, 1].
    pub gray: Vec<Array2<f64>>,
    /// Adaptive-threshold binarization of each gray map, values in {0, 1}.
    pub binary: Vec<Array2<f64>>,
    /// Per-pixel majority vote over the binary maps, in {0, 1}.
    pub majority: Array2<f64>,
    /// Gray consensus map, in [0, 1]; 0 wherever the majority is 0.
    pub consensus_gray: Array2<f64>,
}

/// Binarize a gray saliency map at twice its mean, clamped below 1 so a
/// uniformly bright map does not threshold itself away. The comparison is
/// strict, so an all-zero map stays all zero.
pub fn adaptive_threshold(p: &Array2<f64>) -> Array2<f64> {
    assert!(!p.is_empty(), "adaptive_threshold on an empty map");
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    let tau = (2.0 * mean).min(1.0 - 1e-6);
    p.mapv(|v| if v > tau { 1.0 } else { 0.0 })
}

/// Combine gray predictions and their binarizations into the majority map
/// and the gray consensus map. Callers normally want [`consensus`]; this
/// entry point exists for inputs whose votes are already decided.
pub fn consensus_from_binary(
    gray: &[Array2<f64>],
    binary: &[Array2<f64>],
) -> (Array2<f64>, Array2<f64>) {
    let c = gray.len();
    assert!(c > 0 && binary.len() == c, "need matching non-empty inputs");
    let (h, w) = gray[0].dim();
    let mut majority = Array2::<f64>::zeros((h, w));
    let mut consensus_gray = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let ones = binary.iter().filter(|b| b[[y, x]] == 1.0).count();
            if 2 * ones > c {
                majority[[y, x]] = 1.0;
                let mut sum = 0.0;
                for (g, b) in gray.iter().zip(binary) {
                    if b[[y, x]] == 1.0 {
                        sum += g[[y, x]];
                    }
                }
                consensus_gray[[y, x]] =
                    (ones as f64 / c as f64) * (sum / ones as f64);
            }
        }
    }
    (majority, consensus_gray)
}

/// Full consensus over C sampled gray predictions: binarize each with
/// [`adaptive_threshold`], take the per-pixel majority, and average the
/// agreeing gray values scaled by the agreement fraction.
pub fn consensus(preds: &[Array2<f64>]) -> Result<PredictionSet> {
    if preds.is_empty() {
        return Err(CoreError::Invalid(
            "consensus needs at least one prediction".into(),
        ));
    }
    let dim = preds[0].dim();
    for (i, p) in preds.iter().enumerate() {
        if p.dim() != dim {
            return Err(CoreError::Shape {
                context: format!("consensus prediction {i}"),
                expected: format!("{:?}", dim),
                actual: format!("{:?}", p.dim()),
            });
        }
    }
    let binary: Vec<Array2<f64>> = preds.iter().map(adaptive_threshold).collect();
    let (majority, consensus_gray) = consensus_from_binary(preds, &binary);
    Ok(PredictionSet {
        gray: preds.to_vec(),
        binary,
        majority,
        consensus_gray,
    })
}
