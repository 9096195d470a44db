//! Training objectives: the CVAE loss (reconstruction + KL), the depth loss
//! (smooth-L1 + boundary IOU), the edge-aware smoothness loss, and their
//! weighted total.
//!
//! Reductions: BCE and smooth-L1 use the mean so magnitudes are resolution
//! independent; the smoothness term stays a sum over interior differences,
//! anchored by its analytic constant-map value.

use crate::latent::{kl_divergence_var, GaussianLatentVar};
use crate::tensor::{
    forward_diff_x, forward_diff_y, max_elem, scalar, softplus, stable_sigmoid, Arr, Var,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Loss weights and constants. All fields default individually so sparse
/// config files can override just one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Depth-loss weight lambda_1.
    pub lambda1: f64,
    /// Smoothness weight lambda_2.
    pub lambda2: f64,
    /// Edge sharpness alpha in exp(-alpha |dIg|).
    pub alpha: f64,
    /// Epsilon inside Psi(s) = sqrt(s^2 + psi_eps).
    pub psi_eps: f64,
    /// Smooth-L1 quadratic-to-linear transition point.
    pub smoothl1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.3,
            lambda2: 0.3,
            alpha: 10.0,
            psi_eps: 1e-6,
            smoothl1_beta: 1.0,
        }
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and a binary target,
/// computed in the numerically stable fused form
/// `max(x, 0) - x*y + ln(1 + exp(-|x|))`.
pub fn bce_with_logits_mean<'t>(logits: Var<'t>, target: &Array2<f64>) -> Var<'t> {
    let tape = logits.tape;
    let y = target.clone();
    let value = tape.with_value(logits.id, |x| {
        assert_eq!(x.shape(), y.shape(), "bce: logits and target shapes differ");
        let mut acc = 0.0;
        for (&xv, &yv) in x.iter().zip(y.iter()) {
            acc += xv.max(0.0) - xv * yv + softplus(-xv.abs());
        }
        scalar(acc / x.len() as f64)
    });
    tape.push(
        value,
        vec![logits.id],
        Some(Box::new(move |g, parents, _| {
            let x = parents[0];
            let n = x.len() as f64;
            let gv = crate::tensor::scalar_value(g) / n;
            let mut dx = Arr::zeros(x.raw_dim());
            for ((d, &xv), &yv) in dx.iter_mut().zip(x.iter()).zip(y.iter()) {
                *d = gv * (stable_sigmoid(xv) - yv);
            }
            vec![dx]
        })),
    )
}

/// CVAE objective: mean reconstruction BCE plus the prior/posterior KL.
/// During training the stochastic feature behind `p_logit` is drawn from
/// `q`; at test time the same code runs with `q = p` (KL becomes zero).
pub fn cvae_loss<'t>(
    p_logit: Var<'t>,
    y: &Array2<f64>,
    q: GaussianLatentVar<'t>,
    p: GaussianLatentVar<'t>,
) -> Var<'t> {
    bce_with_logits_mean(p_logit, y).add(kl_divergence_var(q, p))
}

/// Max-normalized gradient magnitude of a map, using the Chebyshev norm
/// `max(|dx|, |dy|)` of the forward differences. The Chebyshev norm keeps
/// the magnitudes of a binary mask binary (an L2 norm would put sqrt(2) at
/// corners), which the exact-zero identical-mask anchor needs. A perfectly
/// flat map keeps its all-zero magnitude instead of dividing by zero.
fn normalized_grad_magnitude(m: Var<'_>) -> Var<'_> {
    let mag = max_elem(forward_diff_x(m).abs(), forward_diff_y(m).abs());
    let mx = mag.max_reduce();
    if mx.scalar() > 0.0 {
        mag.div_by_scalar_var(mx)
    } else {
        mag
    }
}

/// Boundary IOU loss between two maps: one minus a soft Dice overlap of
/// their max-normalized gradient magnitudes. Symmetric; in [0, 1].
///
/// The degenerate case where both magnitude sums are zero (two flat maps)
/// is defined as 0, a trivially perfect boundary agreement. The guard is a
/// branch rather than an epsilon so the binary-map anchors are exact.
pub fn boundary_iou_loss<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let tape = a.tape;
    let ga = normalized_grad_magnitude(a);
    let gb = normalized_grad_magnitude(b);
    let num = ga.mul(gb).sum().mul_scalar(2.0);
    let den = ga.sum().add(gb.sum());
    if den.scalar() == 0.0 {
        tape.leaf_scalar(0.0)
    } else {
        num.div(den).neg().add_scalar(1.0)
    }
}

/// Mean smooth-L1 between a prediction and a constant target: quadratic
/// `0.5 d^2 / beta` below `beta`, linear `|d| - 0.5 beta` above.
pub fn smooth_l1_mean<'t>(pred: Var<'t>, target: &Array2<f64>, beta: f64) -> Var<'t> {
    assert!(beta > 0.0, "smooth-L1 beta must be positive");
    let tape = pred.tape;
    let t = target.clone();
    let value = tape.with_value(pred.id, |p| {
        assert_eq!(p.shape(), t.shape(), "smooth_l1: shape mismatch");
        let mut acc = 0.0;
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            let d = (pv - tv).abs();
            acc += if d <= beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            };
        }
        scalar(acc / p.len() as f64)
    });
    tape.push(
        value,
        vec![pred.id],
        Some(Box::new(move |g, parents, _| {
            let p = parents[0];
            let n = p.len() as f64;
            let gv = crate::tensor::scalar_value(g) / n;
            let mut dx = Arr::zeros(p.raw_dim());
            for ((d, &pv), &tv) in dx.iter_mut().zip(p.iter()).zip(t.iter()) {
                let diff = pv - tv;
                *d = gv * (diff / beta).clamp(-1.0, 1.0);
            }
            vec![dx]
        })),
    )
}

/// Depth objective: smooth-L1 against the raw depth plus the boundary IOU
/// alignment with the intensity image.
pub fn depth_loss<'t>(
    dprime: Var<'t>,
    depth: &Array2<f64>,
    ig: &Array2<f64>,
    weights: &LossWeights,
) -> Var<'t> {
    let tape = dprime.tape;
    let ig_leaf = tape.leaf(ig.clone().into_dyn());
    smooth_l1_mean(dprime, depth, weights.smoothl1_beta).add(boundary_iou_loss(dprime, ig_leaf))
}

/// Edge-aware smoothness: sum over interior forward differences in x and y
/// of `Psi(dP * exp(-alpha |dIg|))` with `Psi(s) = sqrt(s^2 + psi_eps)`.
/// Only the (W-1) and (H-1) valid pairs per row/column count, so a constant
/// P on a 4x4 map yields exactly 24 * sqrt(psi_eps).
pub fn smoothness_loss<'t>(p: Var<'t>, ig: &Array2<f64>, weights: &LossWeights) -> Var<'t> {
    let tape = p.tape;
    let (h, w) = ig.dim();
    // Edge-stopping weights from the intensity image, fixed constants.
    let mut wx = Array2::<f64>::zeros((h, w.saturating_sub(1)));
    let mut wy = Array2::<f64>::zeros((h.saturating_sub(1), w));
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            wx[[y, x]] = (-weights.alpha * (ig[[y, x + 1]] - ig[[y, x]]).abs()).exp();
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            wy[[y, x]] = (-weights.alpha * (ig[[y + 1, x]] - ig[[y, x]]).abs()).exp();
        }
    }
    let eps = weights.psi_eps;
    let psi = move |s: f64| (s * s + eps).sqrt();

    let value = tape.with_value(p.id, |pv| {
        assert_eq!(pv.shape(), [h, w], "smoothness: map and intensity sizes differ");
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w - 1 {
                acc += psi((pv[[y, x + 1]] - pv[[y, x]]) * wx[[y, x]]);
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                acc += psi((pv[[y + 1, x]] - pv[[y, x]]) * wy[[y, x]]);
            }
        }
        scalar(acc)
    });
    let (wx2, wy2) = (wx, wy);
    tape.push(
        value,
        vec![p.id],
        Some(Box::new(move |g, parents, _| {
            let pv = parents[0];
            let gv = crate::tensor::scalar_value(g);
            let mut dp = Arr::zeros(pv.raw_dim());
            // dPsi/ds = s / sqrt(s^2 + eps)
            for y in 0..h {
                for x in 0..w - 1 {
                    let wgt = wx2[[y, x]];
                    let s = (pv[[y, x + 1]] - pv[[y, x]]) * wgt;
                    let ds = gv * s / (s * s + eps).sqrt() * wgt;
                    dp[[y, x + 1]] += ds;
                    dp[[y, x]] -= ds;
                }
            }
            for y in 0..h - 1 {
                for x in 0..w {
                    let wgt = wy2[[y, x]];
                    let s = (pv[[y + 1, x]] - pv[[y, x]]) * wgt;
                    let ds = gv * s / (s * s + eps).sqrt() * wgt;
                    dp[[y + 1, x]] += ds;
                    dp[[y, x]] -= ds;
                }
            }
            vec![dp]
        })),
    )
}

/// Weighted total: `L_cvae + lambda1 * L_depth + lambda2 * L_smooth`.
pub fn total_loss<'t>(
    cvae: Var<'t>,
    depth: Var<'t>,
    smooth: Var<'t>,
    weights: &LossWeights,
) -> Var<'t> {
    cvae.add(depth.mul_scalar(weights.lambda1))
        .add(smooth.mul_scalar(weights.lambda2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::GaussianLatent;
    use crate::tensor::{gradcheck, Tape};
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf2<'t>(tape: &'t Tape, a: &Array2<f64>) -> Var<'t> {
        tape.leaf(a.clone().into_dyn())
    }

    fn rand_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let tape = Tape::new();
        let logits = leaf2(&tape, &Array2::zeros((4, 4)));
        let y = Array2::from_shape_fn((4, 4), |(r, c)| ((r + c) % 2) as f64);
        let loss = bce_with_logits_mean(logits, &y).scalar();
        assert!(
            (loss - std::f64::consts::LN_2).abs() < 1e-12,
            "BCE at probability 0.5 is ln 2 for any target, got {loss}"
        );
    }

    #[test]
    fn bce_perfect_saturated_logits_is_zero() {
        let y = Array2::from_shape_fn((3, 5), |(r, c)| ((r * 5 + c) % 3 == 0) as u8 as f64);
        let logits = y.mapv(|v| if v == 1.0 { 1e6 } else { -1e6 });
        let tape = Tape::new();
        let loss = bce_with_logits_mean(leaf2(&tape, &logits), &y).scalar();
        assert_eq!(loss, 0.0, "saturated correct logits give exactly zero BCE");
    }

    #[test]
    fn cvae_decomposes_into_bce_plus_kl() {
        let y = Array2::from_shape_fn((4, 4), |(r, _)| (r % 2) as f64);
        let logits = y.mapv(|v| if v == 1.0 { 1e6 } else { -1e6 });
        let q0 = GaussianLatent::new(array![0.5, -0.3], array![0.2, 0.1]).unwrap();
        let p0 = GaussianLatent::new(array![0.0, 0.4], array![-0.2, 0.3]).unwrap();

        let tape = Tape::new();
        let q = GaussianLatentVar::leaf(&tape, &q0);
        let p = GaussianLatentVar::leaf(&tape, &p0);
        let loss = cvae_loss(leaf2(&tape, &logits), &y, q, p).scalar();
        let kl = crate::latent::kl_divergence(&q0, &p0).unwrap();
        assert!(
            (loss - kl).abs() < 1e-15,
            "perfect reconstruction leaves exactly the KL term"
        );

        // q = p and perfect reconstruction: total loss 0.
        let tape = Tape::new();
        let q = GaussianLatentVar::leaf(&tape, &q0);
        let p = GaussianLatentVar::leaf(&tape, &q0);
        assert_eq!(cvae_loss(leaf2(&tape, &logits), &y, q, p).scalar(), 0.0);
    }

    #[test]
    fn boundary_iou_identical_binary_maps_is_exactly_zero() {
        let mut m = Array2::zeros((6, 6));
        for y in 2..4 {
            for x in 2..5 {
                m[[y, x]] = 1.0;
            }
        }
        let tape = Tape::new();
        let loss = boundary_iou_loss(leaf2(&tape, &m), leaf2(&tape, &m)).scalar();
        assert_eq!(loss, 0.0, "identical binary edge maps give exactly 0");
    }

    #[test]
    fn boundary_iou_disjoint_supports_is_exactly_one() {
        // Two flat-gradient maps whose edges live on disjoint pixels.
        let mut a = Array2::zeros((8, 8));
        let mut b = Array2::zeros((8, 8));
        a[[1, 1]] = 1.0;
        b[[6, 6]] = 1.0;
        let tape = Tape::new();
        let loss = boundary_iou_loss(leaf2(&tape, &a), leaf2(&tape, &b)).scalar();
        assert_eq!(loss, 1.0, "disjoint edge supports give exactly 1");
    }

    #[test]
    fn boundary_iou_flat_maps_defined_as_zero() {
        let tape = Tape::new();
        let a = leaf2(&tape, &Array2::from_elem((5, 5), 0.3));
        let b = leaf2(&tape, &Array2::from_elem((5, 5), 0.9));
        assert_eq!(boundary_iou_loss(a, b).scalar(), 0.0);
    }

    #[test]
    fn boundary_iou_matches_direct_summation_on_2x2() {
        let a = array![[0.0, 1.0], [0.0, 0.0]];
        let b = array![[0.0, 0.0], [0.0, 1.0]];
        let tape = Tape::new();
        let loss = boundary_iou_loss(leaf2(&tape, &a), leaf2(&tape, &b)).scalar();

        // Independent direct summation of the definition.
        let grad_mag = |m: &Array2<f64>| {
            let (h, w) = m.dim();
            let mut g = Array2::<f64>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let dx = if x + 1 < w { m[[y, x + 1]] - m[[y, x]] } else { 0.0 };
                    let dy = if y + 1 < h { m[[y + 1, x]] - m[[y, x]] } else { 0.0 };
                    g[[y, x]] = dx.abs().max(dy.abs());
                }
            }
            let mx = g.iter().cloned().fold(0.0, f64::max);
            if mx > 0.0 {
                g.mapv_inplace(|v| v / mx);
            }
            g
        };
        let (ga, gb) = (grad_mag(&a), grad_mag(&b));
        let inter: f64 = ga.iter().zip(gb.iter()).map(|(x, y)| x * y).sum();
        let expected = 1.0 - 2.0 * inter / (ga.sum() + gb.sum());
        assert!((loss - expected).abs() < 1e-15, "{loss} vs {expected}");
        assert!((0.0..=1.0).contains(&loss));
        // Hand value: edge supports overlap on one of four active pixels.
        assert!((loss - 0.5).abs() < 1e-15, "hand-computed overlap: {loss}");
    }

    #[test]
    fn boundary_iou_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let a = rand_map(6, 7, &mut rng);
            let b = rand_map(6, 7, &mut rng);
            let tape = Tape::new();
            let l1 = boundary_iou_loss(leaf2(&tape, &a), leaf2(&tape, &b)).scalar();
            let l2 = boundary_iou_loss(leaf2(&tape, &b), leaf2(&tape, &a)).scalar();
            assert!((l1 - l2).abs() < 1e-12, "symmetry");
            assert!((0.0..=1.0 + 1e-12).contains(&l1), "range: {l1}");
        }
    }

    #[test]
    fn depth_loss_constant_offset_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let depth = rand_map(8, 8, &mut rng).mapv(|v| 0.2 + 0.6 * v);
        let ig = rand_map(8, 8, &mut rng);
        let w = LossWeights::default();

        let tape = Tape::new();
        let d0 = leaf2(&tape, &depth);
        let base_iou = {
            let ig_leaf = leaf2(&tape, &ig);
            boundary_iou_loss(d0, ig_leaf).scalar()
        };
        let shifted = depth.mapv(|v| v + 0.1);
        let tape = Tape::new();
        let loss = depth_loss(leaf2(&tape, &shifted), &depth, &ig, &w).scalar();
        // Constant 0.1 offset: smooth-L1 = 0.5 * 0.01 = 0.005 in the
        // quadratic regime; the offset does not move gradients, so the IOU
        // term is unchanged.
        assert!(
            (loss - (0.005 + base_iou)).abs() < 1e-12,
            "got {loss}, expected {}",
            0.005 + base_iou
        );

        // Additivity: computing the terms separately reproduces the op.
        let tape = Tape::new();
        let dv = leaf2(&tape, &shifted);
        let s = smooth_l1_mean(dv, &depth, w.smoothl1_beta).scalar();
        let i = boundary_iou_loss(dv, leaf2(&tape, &ig)).scalar();
        assert!((loss - (s + i)).abs() < 1e-15);
    }

    #[test]
    fn depth_loss_zero_when_equal_and_aligned() {
        // D' == depth and Ig == depth, with a two-level depth whose
        // normalized gradient magnitudes are binary: smooth-L1 is 0 and the
        // boundary term hits its exact-zero identical-edge-map case.
        let depth = Array2::from_shape_fn((6, 6), |(_, x)| if x < 3 { 0.3 } else { 0.8 });
        let tape = Tape::new();
        let loss = depth_loss(leaf2(&tape, &depth), &depth, &depth, &LossWeights::default());
        assert_eq!(loss.scalar(), 0.0);
    }

    #[test]
    fn smoothness_constant_map_anchor() {
        let w = LossWeights::default();
        let ig = Array2::from_shape_fn((4, 4), |(y, x)| (y as f64 * 4.0 + x as f64) / 15.0);
        let p = Array2::from_elem((4, 4), 0.42);
        let tape = Tape::new();
        let loss = smoothness_loss(leaf2(&tape, &p), &ig, &w).scalar();
        // 24 interior difference terms, each Psi(0) = sqrt(1e-6) = 1e-3.
        assert!((loss - 0.024).abs() < 1e-12, "constant-map anchor: {loss}");
    }

    #[test]
    fn smoothness_is_invariant_to_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let ig = rand_map(5, 6, &mut rng);
        let p = rand_map(5, 6, &mut rng);
        let w = LossWeights::default();
        let tape = Tape::new();
        let a = smoothness_loss(leaf2(&tape, &p), &ig, &w).scalar();
        let b = smoothness_loss(leaf2(&tape, &p.mapv(|v| v + 0.37)), &ig, &w).scalar();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn smoothness_edge_aligned_step_is_nearly_free() {
        // 1-D profile: P steps 0 -> 1 exactly where Ig steps 0 -> 1. The
        // weight exp(-10 * 1) shrinks the penalized slope to ~Psi(0).
        let w = LossWeights::default();
        let mut p = Array2::zeros((1, 8));
        let mut ig = Array2::zeros((1, 8));
        for x in 4..8 {
            p[[0, x]] = 1.0;
            ig[[0, x]] = 1.0;
        }
        let tape = Tape::new();
        let loss = smoothness_loss(leaf2(&tape, &p), &ig, &w).scalar();
        let psi0 = (w.psi_eps).sqrt();
        // 7 interior terms; six are Psi(0), the step term is Psi(e^-10).
        let step_term = ((-10.0f64).exp().powi(2) + w.psi_eps).sqrt();
        let expected = 6.0 * psi0 + step_term;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        // The aligned step costs barely more than no step at all.
        assert!(step_term < 2.0 * psi0);
    }

    #[test]
    fn smoothness_doubles_with_step_height_to_first_order() {
        // On flat Ig the weight is 1; far from the Psi kink the term is
        // approximately linear in the step height.
        let w = LossWeights::default();
        let ig = Array2::zeros((1, 4));
        let mut p1 = Array2::zeros((1, 4));
        let mut p2 = Array2::zeros((1, 4));
        p1[[0, 2]] = 0.3;
        p1[[0, 3]] = 0.3;
        p2[[0, 2]] = 0.6;
        p2[[0, 3]] = 0.6;
        let tape = Tape::new();
        let base = 3.0 * w.psi_eps.sqrt();
        let l1 = smoothness_loss(leaf2(&tape, &p1), &ig, &w).scalar() - base;
        let l2 = smoothness_loss(leaf2(&tape, &p2), &ig, &w).scalar() - base;
        // The single step term is exactly Psi(height) - Psi(0).
        let t1 = (0.3f64 * 0.3 + w.psi_eps).sqrt() - w.psi_eps.sqrt();
        let t2 = (0.6f64 * 0.6 + w.psi_eps).sqrt() - w.psi_eps.sqrt();
        assert!((l1 - t1).abs() < 1e-12);
        assert!((l2 - t2).abs() < 1e-12);
        // Psi is linear only to first order (Psi(s) = |s| + eps/(2|s|) + ..),
        // so the doubling holds to about psi_eps / height^2 relative error.
        assert!(
            (t2 / t1 - 2.0).abs() < 1e-2,
            "near-linear regime: {}",
            t2 / t1
        );
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        let tape = Tape::new();
        let one = tape.leaf_scalar(1.0);
        let total = total_loss(one, one, one, &w).scalar();
        assert!((total - 1.6).abs() < 1e-15, "1 + 0.3 + 0.3 = 1.6");

        let zero = tape.leaf_scalar(0.0);
        assert_eq!(total_loss(zero, zero, zero, &w).scalar(), 0.0);

        let no_aux = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..w
        };
        let c = tape.leaf_scalar(0.7);
        let d = tape.leaf_scalar(5.0);
        assert_eq!(total_loss(c, d, d, &no_aux).scalar(), 0.7);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // The acceptance-level suite runs 8x8; this is the fast in-module
        // version on 5x5 inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let y = Array2::from_shape_fn((5, 5), |_| (rng.random_range(0.0..1.0) > 0.5) as u8 as f64);
        let ig = rand_map(5, 5, &mut rng);
        let depth = rand_map(5, 5, &mut rng);
        let logits0 = rand_map(5, 5, &mut rng).mapv(|v| 4.0 * v - 2.0);
        let dprime0 = rand_map(5, 5, &mut rng);
        let mu_q = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let lv_q = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let mu_p = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let lv_p = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let w = LossWeights::default();

        let f = |inputs: &[Arr]| {
            let tape = Tape::new();
            let logits = tape.leaf(inputs[0].clone());
            let dprime = tape.leaf(inputs[1].clone());
            let q = GaussianLatentVar {
                mu: tape.leaf(inputs[2].clone()),
                logvar: tape.leaf(inputs[3].clone()),
            };
            let p = GaussianLatentVar {
                mu: tape.leaf(inputs[4].clone()),
                logvar: tape.leaf(inputs[5].clone()),
            };
            let cvae = cvae_loss(logits, &y, q, p);
            let dep = depth_loss(dprime, &depth, &ig, &w);
            let smo = smoothness_loss(logits.sigmoid(), &ig, &w);
            total_loss(cvae, dep, smo, &w).scalar()
        };
        let inputs = [
            logits0.into_dyn(),
            dprime0.into_dyn(),
            mu_q.into_dyn(),
            lv_q.into_dyn(),
            mu_p.into_dyn(),
            lv_p.into_dyn(),
        ];

        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let q = GaussianLatentVar {
            mu: vars[2],
            logvar: vars[3],
        };
        let p = GaussianLatentVar {
            mu: vars[4],
            logvar: vars[5],
        };
        let cvae = cvae_loss(vars[0], &y, q, p);
        let dep = depth_loss(vars[1], &depth, &ig, &w);
        let smo = smoothness_loss(vars[0].sigmoid(), &ig, &w);
        let total = total_loss(cvae, dep, smo, &w);
        let grads = tape.backward(total);
        let analytic: Vec<Arr> = vars.iter().map(|&v| grads.wrt(v)).collect();
        let numeric = gradcheck::finite_diff(&f, &inputs);
        let err = gradcheck::max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "total-loss gradcheck: {err}");
    }
}
