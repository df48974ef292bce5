use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique path-like name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param_set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// One forward pass: a fresh graph plus lazily bound parameters.
pub struct Fwd<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Fwd<'a> {
    /// Parameters enter the graph as trainable leaves.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    /// Parameters enter the graph as constants.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    /// Continues building on an existing graph (used when a caller such as a
    /// gradient check owns the graph).
    pub fn on_graph(store: &'a ParamStore, g: Graph, trainable: bool) -> Self {
        Self {
            g,
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    /// Gives the graph back, dropping the parameter bindings.
    pub fn into_graph(self) -> Graph {
        self.g
    }

    /// Routes parameter `id` through `v` instead of its stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) -> Result<()> {
        if self.g.shape(v) != self.store.get(id).shape() {
            return Err(Error::Shape {
                op: "bind",
                lhs: self.store.get(id).shape().to_vec(),
                rhs: self.g.shape(v).to_vec(),
            });
        }
        self.bound[id.0] = Some(v);
        Ok(())
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Gradients of every parameter that took part in the pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v)).map(|g| (ParamId(i), g.clone())))
            .collect()
    }
}
