//! Named parameter tensors and their binding into a [`Graph`].

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters of one store registered as graph leaves, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Wraps vars already bound in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl AsRef<[Var]> for BoundParams {
    fn as_ref(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Registers every tensor as a leaf (`trainable`) or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundParams { vars }
    }

    /// Collects gradients of a bound store, zero where none flowed.
    pub fn gradients(&self, g: &Graph, bound: &BoundParams) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Replaces all values from another list with identical shapes.
    pub fn load(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for (i, (name, t)) in values.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Invalid(alloc::format!("expected parameter {}, found {}", self.names[i], name)));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::shape("load", self.tensors[i].shape(), t.shape()));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.names.iter().map(|n| n.to_string()).zip(self.tensors.iter().cloned()).collect()
    }
}
