//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an eager tape: every operation computes its value when it
//! is recorded and keeps it for the backward sweep, which walks the nodes in
//! exact reverse order. Only bias addition broadcasts; every other binary
//! operation requires identical shapes. Any operation that produces a NaN or
//! infinity fails with [`GraphError::NonFinite`].

mod check;
mod graph;
mod tensor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use check::{central_difference, grad_check};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::softmax_in_place;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} is not recorded on this graph")]
    UnknownVar(usize),
    #[error("{0} needs at least one input")]
    Empty(&'static str),
    #[error("cannot normalize a zero-norm row")]
    ZeroNorm,
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
}

/// Named collection of parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    /// True when both sets hold the same names with bitwise-equal values.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests;
