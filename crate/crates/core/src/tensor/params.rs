//! Parameter storage shared by all layers of a model.
//!
//! Layers hold [`ParamId`] handles into a central [`Params`] table. During a
//! forward pass each used parameter is leased onto the tape as a leaf; after
//! `backward` the [`Lease`] copies the accumulated leaf gradients back into
//! the table, where the optimizer consumes them.
//!
//! Non-trainable entries (batch-norm running statistics) live in the same
//! table so checkpoints can serialize every array that affects inference
//! under one naming scheme.

use super::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to one entry in a [`Params`] table.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
    pub trainable: bool,
}

#[derive(Clone)]
pub struct Params<T: Scalar> {
    items: Vec<Param<T>>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { items: Vec::new() }
    }

    /// Register a tensor under a unique name. Registration order is the
    /// serialization order of checkpoints, so model construction must be
    /// deterministic.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name: {name}"
        );
        let n = value.dims.numel();
        self.items.push(Param {
            name,
            value,
            grad: vec![T::ZERO; n],
            m: vec![T::ZERO; n],
            v: vec![T::ZERO; n],
            trainable,
        });
        ParamId(self.items.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.items[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.items[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.items[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.items.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.items.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            for g in &mut p.grad {
                *g = T::ZERO;
            }
        }
    }

    /// Number of trainable scalars (excludes running statistics).
    pub fn trainable_scalar_count(&self) -> usize {
        self.items
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.dims.numel())
            .sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let dst = &mut self.items[id.0].grad;
        debug_assert_eq!(dst.len(), grad.len());
        for (d, s) in dst.iter_mut().zip(grad) {
            *d += *s;
        }
    }
}

/// Records which tape leaf each parameter was leased to during one forward
/// pass, so gradients can flow back to the table afterwards.
#[derive(Default, Debug)]
pub struct Lease {
    entries: Vec<(ParamId, Var)>,
}

impl Lease {
    pub fn new() -> Self {
        Lease { entries: Vec::new() }
    }

    /// Put the parameter's current value on the tape (once per pass).
    pub fn lease<T: Scalar>(&mut self, g: &mut Graph<T>, ps: &Params<T>, id: ParamId) -> Var {
        if let Some((_, var)) = self.entries.iter().find(|(p, _)| *p == id) {
            return *var;
        }
        let var = g.leaf(ps.value(id).clone(), ps.get(id).trainable);
        self.entries.push((id, var));
        var
    }

    /// Add the leaf gradients accumulated by `backward` into the table.
    pub fn accumulate<T: Scalar>(&self, g: &Graph<T>, ps: &mut Params<T>) {
        for (id, var) in &self.entries {
            if let Some(grad) = g.grad(*var) {
                ps.accumulate_grad(*id, grad);
            }
        }
    }
}

/// He (Kaiming) uniform bound `sqrt(6 / fan_in)`.
pub fn he_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Sample a tensor from `U(-bound, bound)` with the He bound for `fan_in`.
///
/// Draws happen in `f64`, so the same seed produces the same underlying
/// values in either precision.
pub fn he_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    dims: super::Dims,
    fan_in: usize,
) -> Tensor<T> {
    let bound = he_uniform_bound(fan_in);
    let data = (0..dims.numel())
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor { dims, data }
}
