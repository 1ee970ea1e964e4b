//! Named, optionally trainable parameter tensors and their gradients.

use alloc::string::String;
use alloc::vec::Vec;

use core::fmt;

use crate::tensor::Tensor;

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamError {
    /// Parameter identifiers must be unique within a store.
    DuplicateName(String),
}

impl fmt::Display for ParamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamError::DuplicateName(name) => write!(f, "duplicate parameter name {name:?}"),
        }
    }
}

impl core::error::Error for ParamError {}

/// Flat collection of model parameters. Models hold [`ParamId`]s and the
/// store owns the tensors, so a training loop can mutate values while
/// model structure stays immutable.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
    ) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(ParamError::DuplicateName(name));
        }
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar entries across trainable parameters. Masked
    /// layers report their own structural count; this is the raw storage
    /// size.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }
}

/// Per-parameter gradient tensors, keyed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Zero gradients for every trainable parameter of the store.
    pub fn zeros(store: &ParamStore) -> Self {
        let grads = store
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    Some(Tensor::zeros(p.tensor.rows(), p.tensor.cols()))
                } else {
                    None
                }
            })
            .collect();
        Self { grads }
    }

    /// A gradient map with no entries at all; useful to exercise the
    /// missing-gradient contract of the optimizer.
    pub fn empty(n_params: usize) -> Self {
        Self {
            grads: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, contribution: &Tensor) {
        if let Some(g) = self.grads.get_mut(id.0).and_then(|g| g.as_mut()) {
            for (e, c) in g.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.data().iter().all(|v| v.is_finite()))
    }
}
