//! Named parameter storage and its binding into a [`Graph`].

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Ordered map from parameter name to tensor. Tensors with
/// `requires_grad == false` are buffers (e.g. running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients of every parameter bound through `binder`.
    pub fn accumulate(&mut self, graph: &Graph, binder: &Binder<'_>, grads: &Gradients) -> Result<()> {
        for (name, var) in binder.bound() {
            if let Some(g) = grads.get(var) {
                debug_assert!(graph.requires_grad(var));
                self.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Uniform initialiser in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("initialiser shapes are valid")
        .with_requires_grad(true)
}

pub(crate) fn trainable(t: Tensor) -> Tensor {
    t.with_requires_grad(true)
}

/// Creates graph leaves for stored parameters on first use.
///
/// Parameters whose names start with a frozen prefix, and anything requested
/// through [`Binder::constant`], enter the graph as constants.
pub struct Binder<'a> {
    store: &'a ParamStore,
    overrides: Option<&'a HashMap<String, Vec<f64>>>,
    frozen: Vec<String>,
    bound: IndexMap<String, Var>,
    constants: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            overrides: None,
            frozen: Vec::new(),
            bound: IndexMap::new(),
            constants: HashMap::new(),
        }
    }

    /// Binds 64-bit override values in place of stored ones, by name.
    pub fn with_overrides(mut self, overrides: &'a HashMap<String, Vec<f64>>) -> Self {
        self.overrides = Some(overrides);
        self
    }

    pub fn with_frozen_prefixes(mut self, prefixes: &[&str]) -> Self {
        self.frozen = prefixes.iter().map(|p| p.to_string()).collect();
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn values(&self, name: &str) -> Result<(Vec<f64>, Vec<usize>, bool)> {
        let t = self.store.get(name)?;
        let values = match self.overrides.and_then(|o| o.get(name)) {
            Some(v) if v.len() == t.numel() => v.clone(),
            Some(v) => return Err(Error::dim("binder override", t.shape(), &[v.len()])),
            None => t.to_f64(),
        };
        Ok((values, t.shape().to_vec(), t.requires_grad()))
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (values, shape, requires_grad) = self.values(name)?;
        let var = if requires_grad && !self.is_frozen(name) {
            g.variable(values, shape)?
        } else {
            g.constant(values, shape)?
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    /// Binds `name` as a constant regardless of its trainability.
    pub fn constant(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.constants.get(name) {
            return Ok(v);
        }
        let (values, shape, _) = self.values(name)?;
        let var = g.constant(values, shape)?;
        self.constants.insert(name.to_string(), var);
        Ok(var)
    }

    /// Uses an existing graph node for `name` instead of creating a leaf.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    /// Names and handles of every parameter bound with [`Binder::get`].
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn bound_names(&self) -> HashSet<&str> {
        self.bound.keys().map(String::as_str).collect()
    }
}
