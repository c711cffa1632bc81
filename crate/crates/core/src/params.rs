//! Named parameter storage and its binding into a [`Graph`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::tensor::Tensor;

/// Ordered map from parameter name to value. Iteration order is the name order,
/// which makes initialisation, optimiser updates and serialisation deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.tensors.contains_key(&name), "duplicate parameter {name}");
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &Graph) -> Bound {
        self.bind_with(g, true)
    }

    /// Registers every tensor as a constant of `g` (inference).
    pub fn bind_frozen(&self, g: &Graph) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradient of every bound parameter, zero-filled where unused.
    pub fn gradients(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}
