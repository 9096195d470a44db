//! Reverse-mode automatic differentiation over `f64` dense arrays.
//!
//! The training-time networks in this crate are small enough that a
//! tape-based scalar-precision engine is preferable to a heavyweight
//! framework: every operation records a node on a [`Tape`], and
//! [`Tape::backward`] walks the nodes in reverse to accumulate gradients.
//! All values are `f64` so analytic gradients can be validated against
//! central finite differences at tight tolerances.
//!
//! Tapes are cheap, single-threaded objects. A fresh tape is built per
//! forward pass; parallelism happens across tapes, never within one.

mod ops;
mod params;

pub mod gradcheck;

pub use ops::{
    bilinear_resize, bilinear_resize_arr, col2im, concat_channels, conv2d, forward_diff_x,
    forward_diff_x_arr, forward_diff_y, forward_diff_y_arr, global_avg_pool, im2col, linear,
    max_elem, max_pool2, min_of, permute_channels, slice1d, squeeze_leading, unsqueeze_leading,
    Conv2dSpec,
};
pub use params::{BoundParams, ParamId, ParamSet};

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;

/// Dense dynamic-rank `f64` array, the single value type on the tape.
pub type Arr = ArrayD<f64>;

/// Scalar (zero-dimensional) array constructor.
pub fn scalar(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Extract the value of a zero-dimensional array.
pub fn scalar_value(a: &Arr) -> f64 {
    debug_assert_eq!(a.ndim(), 0, "expected scalar array, got shape {:?}", a.shape());
    *a.iter().next().expect("scalar array has one element")
}

type BackwardFn = Box<dyn Fn(&Arr, &[&Arr], &Arr) -> Vec<Arr>>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    /// `(output_grad, parent_values, output_value) -> parent_grads`.
    /// `None` marks a leaf (input or parameter).
    backward: Option<BackwardFn>,
}

/// Append-only computation graph. Node ids are topologically ordered by
/// construction, so the backward pass is a single reverse sweep.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf value (an input or a parameter).
    pub fn leaf(&self, value: Arr) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    /// Record a scalar leaf.
    pub fn leaf_scalar(&self, v: f64) -> Var<'_> {
        self.leaf(scalar(v))
    }

    pub(crate) fn push(
        &self,
        value: Arr,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var { tape: self, id }
    }

    pub(crate) fn with_value<R>(&self, id: usize, f: impl FnOnce(&Arr) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[id].value)
    }

    pub(crate) fn with_values2<R>(
        &self,
        a: usize,
        b: usize,
        f: impl FnOnce(&Arr, &Arr) -> R,
    ) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    /// Reverse sweep from `root`, seeding its gradient with ones.
    ///
    /// Returns the gradient of `root` with respect to every reachable node;
    /// unreached nodes report `None`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Arr>> = vec![None; nodes.len()];
        grads[root.id] = Some(Arr::ones(nodes[root.id].value.raw_dim()));

        for id in (0..=root.id).rev() {
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_values: Vec<&Arr> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let parent_grads = backward(&out_grad, &parent_values, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(
                        pg.shape(),
                        nodes[pid].value.shape(),
                        "gradient shape mismatch for node {pid}"
                    );
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(out_grad);
        }
        Gradients { grads }
    }
}

/// Handle to a tape node. Cheap to copy; tied to the tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Arr> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`; zero if `v` did not influence the root.
    pub fn wrt(&self, v: Var<'_>) -> Arr {
        match self.get(v) {
            Some(g) => g.clone(),
            None => v.tape.with_value(v.id, |val| Arr::zeros(val.raw_dim())),
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> Arr {
        self.tape.with_value(self.id, |v| v.clone())
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.with_value(self.id, |v| v.shape().to_vec())
    }

    /// Scalar value of a zero-dimensional node.
    pub fn scalar(self) -> f64 {
        self.tape.with_value(self.id, scalar_value)
    }

    fn unary(self, value: Arr, backward: BackwardFn) -> Var<'t> {
        self.tape.push(value, vec![self.id], Some(backward))
    }

    fn binary(self, other: Var<'t>, value: Arr, backward: BackwardFn) -> Var<'t> {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
        self.tape
            .push(value, vec![self.id, other.id], Some(backward))
    }

    fn assert_same_shape(self, other: Var<'t>, op: &str) {
        self.tape.with_values2(self.id, other.id, |a, b| {
            assert_eq!(a.shape(), b.shape(), "{op}: operand shapes differ");
        });
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_shape(other, "add");
        let value = self.tape.with_values2(self.id, other.id, |a, b| a + b);
        self.binary(other, value, Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_shape(other, "sub");
        let value = self.tape.with_values2(self.id, other.id, |a, b| a - b);
        self.binary(other, value, Box::new(|g, _, _| vec![g.clone(), -g]))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_shape(other, "mul");
        let value = self.tape.with_values2(self.id, other.id, |a, b| a * b);
        self.binary(
            other,
            value,
            Box::new(|g, parents, _| vec![g * parents[1], g * parents[0]]),
        )
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.assert_same_shape(other, "div");
        let value = self.tape.with_values2(self.id, other.id, |a, b| a / b);
        self.binary(
            other,
            value,
            Box::new(|g, parents, _| {
                let (a, b) = (parents[0], parents[1]);
                vec![g / b, -(g * a) / (b * b)]
            }),
        )
    }

    pub fn neg(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| -a);
        self.unary(value, Box::new(|g, _, _| vec![-g]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| a + c);
        self.unary(value, Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| a * c);
        self.unary(value, Box::new(move |g, _, _| vec![g * c]))
    }

    /// Elementwise product with a constant array (no gradient to the mask).
    pub fn mul_arr(self, mask: &Arr) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| {
            assert_eq!(a.shape(), mask.shape(), "mul_arr: shape mismatch");
            a * mask
        });
        let mask = mask.clone();
        self.unary(value, Box::new(move |g, _, _| vec![g * &mask]))
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| a.mapv(f64::exp));
        self.unary(value, Box::new(|g, _, out| vec![g * out]))
    }

    pub fn sqrt(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| a.mapv(f64::sqrt));
        self.unary(value, Box::new(|g, _, out| vec![g * &out.mapv(|y| 0.5 / y)]))
    }

    pub fn abs(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| a.mapv(f64::abs));
        self.unary(
            value,
            Box::new(|g, parents, _| vec![g * &parents[0].mapv(|x| x.signum())]),
        )
    }

    pub fn square(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| a.mapv(|x| x * x));
        self.unary(
            value,
            Box::new(|g, parents, _| vec![g * &(parents[0] * 2.0)]),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| a.mapv(stable_sigmoid));
        self.unary(
            value,
            Box::new(|g, _, out| vec![g * &out.mapv(|y| y * (1.0 - y))]),
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let value = self
            .tape
            .with_value(self.id, |a| a.mapv(|x| if x >= 0.0 { x } else { slope * x }));
        self.unary(
            value,
            Box::new(move |g, parents, _| {
                vec![g * &parents[0].mapv(|x| if x >= 0.0 { 1.0 } else { slope })]
            }),
        )
    }

    pub fn sum(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| scalar(a.sum()));
        self.unary(
            value,
            Box::new(|g, parents, _| {
                let gv = scalar_value(g);
                vec![Arr::from_elem(parents[0].raw_dim(), gv)]
            }),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let value = self
            .tape
            .with_value(self.id, |a| scalar(a.sum() / a.len() as f64));
        self.unary(
            value,
            Box::new(|g, parents, _| {
                let n = parents[0].len() as f64;
                let gv = scalar_value(g) / n;
                vec![Arr::from_elem(parents[0].raw_dim(), gv)]
            }),
        )
    }

    /// Maximum over all elements. The gradient routes to the first argmax.
    pub fn max_reduce(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |a| {
            scalar(a.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        });
        self.unary(
            value,
            Box::new(|g, parents, _| {
                let p = parents[0];
                let mut grad = Arr::zeros(p.raw_dim());
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                grad.as_slice_mut().expect("standard layout")[best_i] = scalar_value(g);
                vec![grad]
            }),
        )
    }

    /// Elementwise division by a scalar (zero-dimensional) node.
    pub fn div_by_scalar_var(self, s: Var<'t>) -> Var<'t> {
        debug_assert_eq!(s.shape(), Vec::<usize>::new(), "divisor must be scalar");
        let value = self
            .tape
            .with_values2(self.id, s.id, |a, b| a / scalar_value(b));
        self.binary(
            s,
            value,
            Box::new(|g, parents, _| {
                let sv = scalar_value(parents[1]);
                let da = g / sv;
                let ds = -(g * parents[0]).sum() / (sv * sv);
                vec![da, scalar(ds)]
            }),
        )
    }

    /// Elementwise product with a scalar (zero-dimensional) node.
    pub fn mul_by_scalar_var(self, s: Var<'t>) -> Var<'t> {
        debug_assert_eq!(s.shape(), Vec::<usize>::new(), "factor must be scalar");
        let value = self
            .tape
            .with_values2(self.id, s.id, |a, b| a * scalar_value(b));
        self.binary(
            s,
            value,
            Box::new(|g, parents, _| {
                let sv = scalar_value(parents[1]);
                let da = g * sv;
                let ds = (g * parents[0]).sum();
                vec![da, scalar(ds)]
            }),
        )
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.5..1.5))
    }

    /// FD-check a scalar-valued function of two arrays built from Var ops.
    fn check_binary(
        name: &str,
        build: impl for<'t> Fn(Var<'t>, Var<'t>) -> Var<'t> + Copy,
        positive_inputs: bool,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut a = rand_arr(&[3, 4], &mut rng);
        let mut b = rand_arr(&[3, 4], &mut rng);
        if positive_inputs {
            a.mapv_inplace(|x| x.abs() + 0.5);
            b.mapv_inplace(|x| x.abs() + 0.5);
        }

        let tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let out = build(va, vb).sum();
        let grads = tape.backward(out);
        let analytic = [grads.wrt(va), grads.wrt(vb)];

        let f = |inputs: &[Arr]| {
            let tape = Tape::new();
            let va = tape.leaf(inputs[0].clone());
            let vb = tape.leaf(inputs[1].clone());
            build(va, vb).sum().scalar()
        };
        let numeric = gradcheck::finite_diff(&f, &[a, b]);
        let err = gradcheck::max_rel_error(&analytic, &numeric);
        assert!(err < 1e-6, "{name}: max rel error {err}");
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        check_binary("add", |a, b| a.add(b), false);
        check_binary("sub", |a, b| a.sub(b), false);
        check_binary("mul", |a, b| a.mul(b), false);
        check_binary("div", |a, b| a.div(b), true);
        check_binary("mix", |a, b| a.mul(b).sigmoid().mul(a.exp()), false);
        check_binary("sqrt", |a, b| a.add(b).sqrt(), true);
        check_binary("leaky", |a, b| a.mul(b).leaky_relu(0.1), false);
        check_binary(
            "scalar_div",
            |a, b| a.div_by_scalar_var(b.square().sum().add_scalar(0.1)),
            false,
        );
        check_binary(
            "max_norm",
            |a, b| a.mul(b).div_by_scalar_var(a.abs().max_reduce()),
            false,
        );
    }

    #[test]
    fn gradient_accumulates_over_reused_nodes() {
        // f(x) = x*x + x  =>  df/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(scalar(3.0));
        let f = x.mul(x).add(x);
        let g = tape.backward(f);
        assert_eq!(scalar_value(&g.wrt(x)), 7.0);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(scalar(1.0));
        let y = tape.leaf(scalar(2.0));
        let f = x.mul_scalar(4.0);
        let g = tape.backward(f);
        assert!(g.get(y).is_none());
        assert_eq!(scalar_value(&g.wrt(y)), 0.0);
    }

    #[test]
    fn mean_of_power_of_two_sized_map_is_exact() {
        let tape = Tape::new();
        let x = tape.leaf(Arr::ones(IxDyn(&[16, 16])));
        let m = x.mean();
        let g = tape.backward(m);
        let gx = g.wrt(x);
        assert!(gx.iter().all(|&v| v == 1.0 / 256.0));
    }

    #[test]
    fn stable_sigmoid_extremes() {
        assert_eq!(stable_sigmoid(800.0), 1.0);
        assert_eq!(stable_sigmoid(-800.0), 0.0);
        assert!((stable_sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }
}
