//! Named, shaped parameter collection shared by every network component.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Parameters registered as tracked leaves on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars attached in parameter insertion order.
    pub fn from_vars(vars: &[Var]) -> Self {
        Bound { vars: vars.to_vec() }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn attach(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Replaces the value of `name`, which must already exist with the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Incompatible(format!("unknown parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::Incompatible(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    /// L2 norm of every parameter, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.iter().map(|(n, t)| (n.to_string(), t.norm())).collect()
    }
}

/// Uniform in `[-bound, bound]`.
pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Fan-in scaled uniform initialization, `bound = 1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}
