use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), lookup: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(TensorError::Param(format!("duplicate parameter name {name}")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the tensor with `name`, requiring an identical shape.
    pub fn assign(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| TensorError::Param(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(TensorError::Param(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                t.shape(),
                self.tensors[id.0].shape()
            )));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Places every parameter on `graph`, returning handles in id order.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { graph.leaf(t.clone()) } else { graph.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients aligned with the parameter ids; missing gradients become zeros.
    pub fn collect<T: Real>(&self, graph: &Graph<T>, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(graph.value(v).shape())))
            .collect()
    }
}
