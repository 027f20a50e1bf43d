use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// A named trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether L2 weight decay applies (kernels yes, biases no).
    pub decay: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Element = f32> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Leaf variables created for the parameters during one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    /// Binds parameter `i` to `vars[i]`, for callers that create the leaves.
    pub fn from_vars(vars: &[Var]) -> Self {
        Bindings {
            vars: vars.iter().map(|&v| Some(v)).collect(),
        }
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars.get(id.0).copied().flatten()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param {
            name,
            tensor: tensor.with_grad(true),
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Leaf for parameter `id`, creating it on first use within `bindings`.
    pub fn bind(&self, graph: &mut Graph<T>, bindings: &mut Bindings, id: ParamId) -> Var {
        if bindings.vars.len() < self.params.len() {
            bindings.vars.resize(self.params.len(), None);
        }
        *bindings.vars[id.0].get_or_insert_with(|| graph.leaf(&self.params[id.0].tensor))
    }

    /// Adds the gradients of bound parameters from `graph` into each tensor's
    /// gradient buffer.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, bindings: &Bindings) -> Result<()> {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(g) = bindings.var(ParamId(i)).and_then(|v| graph.grad(v)) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
