use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

/// Graph handles for a [`ParamSet`], index-aligned with its entries.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles for leaves created by hand, in [`ParamSet`] entry order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor));
        self.entries.len() - 1
    }

    /// Appends every entry of `other`.
    pub fn extend(&mut self, other: ParamSet) {
        for (name, t) in other.entries {
            self.push(name, t);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Inserts every parameter into `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound { vars: self.entries.iter().map(|(_, t)| graph.leaf(t)).collect() }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Adds gradients computed on `graph` into the parameters' buffers.
    /// Parameters the loss never reached keep their current buffer.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &Bound) -> Result<()> {
        if bound.vars.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "bound handles ({}) do not match parameter count ({})",
                bound.vars.len(),
                self.entries.len()
            )));
        }
        for ((_, t), &v) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(g) = graph.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Adds a flat per-parameter gradient list (same order as entries).
    pub fn accumulate_flat(&mut self, grads: &[Option<Vec<f64>>]) -> Result<()> {
        for ((_, t), g) in self.entries.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Copies gradients out of `graph` in entry order.
    pub fn extract_grads(graph: &Graph, bound: &Bound) -> Vec<Option<Vec<f64>>> {
        bound.vars.iter().map(|&v| graph.grad(v).map(<[f64]>::to_vec)).collect()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!("parameter count {} vs {}", self.len(), other.len())));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Dimension(format!("parameter {na} {:?} vs {nb} {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }
}
