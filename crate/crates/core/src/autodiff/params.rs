use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable arrays, kept in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers `value` under `name`. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    /// Uniform initialisation in `[-range, range]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], range: f64, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-range..=range))).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let cur = &mut self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::shape("set_param", format!("{name}: {:?} vs {:?}", cur.shape(), value.shape())));
        }
        *cur = value;
        Ok(())
    }

    /// Places every parameter on `graph` as a gradient-tracking leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| graph.variable(t.clone())).collect() }
    }

    /// Treats existing graph values as this store's parameters, in store
    /// order. Lets a gradient check perturb parameters as plain inputs.
    pub fn rebind(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.tensors.len() {
            return Err(Error::contract(format!("rebind: {} values for {} parameters", vars.len(), self.tensors.len())));
        }
        Ok(Bound { vars: vars.to_vec() })
    }

    /// Gradients for every parameter after `graph.backward`; parameters the
    /// loss did not reach get zeros.
    pub fn gradients(&self, graph: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| graph.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Graph handles of a [`ParamStore`] bound to one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
