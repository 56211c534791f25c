//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Parameters keyed by dotted names, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.params
            .get(name)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ParamError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf. Frozen bindings carry no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.requires_grad = trainable;
                t.grad = None;
                (name.clone(), tape.leaf(t))
            })
            .collect();
        ParamVars { vars }
    }

    /// Merges another store under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamStore) {
        for (name, t) in other.params {
            self.params.insert(format!("{prefix}{name}"), t);
        }
    }

    /// Sub-store of every parameter whose name starts with `prefix`, with the
    /// prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect();
        ParamStore { params }
    }

    pub fn expect_shape(&self, name: &str, expected: &[usize]) -> Result<(), ParamError> {
        let got = self.get(name)?.shape();
        if got != expected {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected: expected.to_vec(),
                got: got.to_vec(),
            });
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, ParamError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    /// Handles whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamVars {
        let vars = self
            .vars
            .iter()
            .filter_map(|(n, &v)| n.strip_prefix(prefix).map(|s| (s.to_string(), v)))
            .collect();
        ParamVars { vars }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// He-normal initialisation for a weight with the given fan-in.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Glorot-normal initialisation for a `[fan_in, fan_out]` matrix.
pub fn glorot_normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}
