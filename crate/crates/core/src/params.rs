use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which optimizer owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Convolution/fully-connected weights of the backbone and the classifier.
    Backbone,
    /// Mask-module parameters (`m` and the two affine maps of the gate).
    Mask,
    /// Affine heads of the linear branches.
    Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Vec<S>>,
    pub group: ParamGroup,
}

/// Flat, ordered storage of every trainable tensor of a network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

/// Tape handles of a [`ParamStore`] bound for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, group: ParamGroup) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    /// Number of scalars held by parameters of `group`, or by all when `None`.
    pub fn scalar_count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        )
    }

    /// Adds the tape gradients of a bound pass into each parameter's `grad`.
    /// Parameters the loss never reached receive explicit zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, bound: &Bound) -> Result<()> {
        if bound.0.len() != self.params.len() {
            return Err(Error::Usage(
                "bound tape does not match parameter store".into(),
            ));
        }
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            let g = p.grad.get_or_insert_with(|| vec![S::zero(); p.value.len()]);
            if let Some(tg) = tape.grad(v) {
                g.iter_mut().zip(tg).for_each(|(a, &b)| *a += b);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }
}
