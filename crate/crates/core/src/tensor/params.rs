//! Named parameter storage shared by all networks.
//!
//! Parameters live outside any tape in a [`ParamSet`]; each forward pass
//! binds them onto a fresh tape in registration order. That order is part
//! of the determinism contract: optimizer state, gradient reduction, and
//! checkpoints all index parameters by it.

use super::{Arr, Gradients, Tape, Var};
use std::collections::HashMap;

/// Stable handle to one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arr>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter under a unique name. Name collisions are
    /// construction bugs, so they panic.
    pub fn register(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Arr] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Arr] {
        &mut self.values
    }

    /// Bind every parameter as a leaf on `tape`, in registration order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// All parameter values are finite; guards the optimizer loop.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Tape-bound view of a [`ParamSet`] for one forward pass.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients in registration order; zeros for parameters the loss does
    /// not reach (e.g. the losing heads of a winner-takes-all objective).
    pub fn grads(&self, g: &Gradients) -> Vec<Arr> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::scalar;

    #[test]
    fn registration_order_is_stable_and_names_unique() {
        let mut ps = ParamSet::new();
        let a = ps.register("w1", scalar(1.0));
        let b = ps.register("w2", scalar(2.0));
        assert_eq!(ps.name(a), "w1");
        assert_eq!(ps.name(b), "w2");
        assert_eq!(ps.id_of("w2"), Some(b));
        assert_eq!(ps.scalar_count(), 2);

        let tape = Tape::new();
        let bound = ps.bind(&tape);
        let loss = bound.get(a).mul(bound.get(b));
        let grads = tape.backward(loss);
        let gv = bound.grads(&grads);
        assert_eq!(gv[0].iter().next(), Some(&2.0));
        assert_eq!(gv[1].iter().next(), Some(&1.0));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut ps = ParamSet::new();
        ps.register("w", scalar(0.0));
        ps.register("w", scalar(0.0));
    }
}
