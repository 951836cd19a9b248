//! Ordered, named parameter storage.
//!
//! Parameters live in a [`ParamSet`]: a flat map from dotted names
//! (e.g. `encoder.audio.weight`) to tensors, preserving registration order.
//! Registration order is the canonical order for optimizer state, gradient
//! reduction, and checkpoint layout, which keeps training runs bitwise
//! reproducible.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors in stable registration order.
#[derive(Debug, Clone)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument {
                detail: format!("duplicate parameter name {name}"),
            });
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::InvalidArgument {
                detail: format!("unknown parameter {name}"),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::InvalidArgument {
                detail: format!("unknown parameter {name}"),
            }),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total learnable scalar count.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Iterates `(name, tensor)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Mutable iteration in registration order (optimizer updates).
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// Registers every tensor on a tape in order. With `requires_grad` the
    /// resulting vars are gradient targets.
    pub fn bind(&self, tape: &mut Tape<F>, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Like [`ParamSet::bind`], but one named parameter is substituted by
    /// an existing node (used to gradient-check single parameters: the
    /// substitute is the differentiation target, everything else binds as
    /// a constant).
    pub fn bind_with_substitute(
        &self,
        tape: &mut Tape<F>,
        name: &str,
        substitute: Var,
    ) -> Result<BoundParams> {
        let target = *self.index.get(name).ok_or_else(|| Error::InvalidArgument {
            detail: format!("unknown parameter {name}"),
        })?;
        if tape.shape(substitute) != self.tensors[target].shape() {
            return Err(Error::ShapeMismatch {
                op: "bind_with_substitute",
                lhs: tape.shape(substitute).to_vec(),
                rhs: self.tensors[target].shape().to_vec(),
            });
        }
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == target {
                    substitute
                } else {
                    tape.leaf(t.clone(), false)
                }
            })
            .collect();
        Ok(BoundParams {
            vars,
            index: self.index.clone(),
        })
    }
}

/// Tape handles for a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument {
                detail: format!("unknown parameter {name}"),
            })
    }

    /// Vars in registration order, aligned with `ParamSet::iter`.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers a linear layer (`weight (d_in, d_out)` uniform in
/// `±1/sqrt(d_in)`, `bias (d_out)` zeros) under `prefix`.
pub fn register_linear<F: Real>(
    params: &mut ParamSet<F>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let bound = 1.0 / (d_in as f64).sqrt();
    params.insert(
        format!("{prefix}.weight"),
        Tensor::uniform(vec![d_in, d_out], -bound, bound, rng),
    )?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![d_out]))
}
