//! Central finite differences for validating analytic gradients.

use super::Arr;

/// Numerically differentiate `f` at `inputs` with central differences.
///
/// The step is scaled per element as `h * max(1, |x|)` with
/// `h = cbrt(f64::EPSILON)`, the usual optimum for central differences.
pub fn finite_diff(f: &dyn Fn(&[Arr]) -> f64, inputs: &[Arr]) -> Vec<Arr> {
    let h = f64::EPSILON.cbrt();
    let mut work: Vec<Arr> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Arr::zeros(inputs[i].raw_dim());
        let n = inputs[i].len();
        for j in 0..n {
            let x0 = inputs[i].as_slice().expect("standard layout")[j];
            let step = h * x0.abs().max(1.0);
            work[i].as_slice_mut().expect("standard layout")[j] = x0 + step;
            let up = f(&work);
            work[i].as_slice_mut().expect("standard layout")[j] = x0 - step;
            let down = f(&work);
            work[i].as_slice_mut().expect("standard layout")[j] = x0;
            g.as_slice_mut().expect("standard layout")[j] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Worst-case elementwise relative error between two gradient sets.
///
/// The denominator is floored at 1e-6 so that matching near-zero entries do
/// not blow up the ratio.
pub fn max_rel_error(analytic: &[Arr], numeric: &[Arr]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shapes differ");
        for (&av, &nv) in a.iter().zip(n.iter()) {
            let denom = av.abs().max(nv.abs()).max(1e-6);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}
