//! Named parameter storage shared by the backbone, adapters and head.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Ordered map from parameter name to tensor. `requires_grad == false` means frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (k, t) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                t.requires_grad = trainable;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .values()
            .filter(|t| t.requires_grad)
            .map(Tensor::len)
            .sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.tensors
            .values()
            .filter(|t| !t.requires_grad)
            .map(Tensor::len)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Digest over every tensor whose name starts with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        self.with_prefix(prefix).fold(0xcbf2_9ce4_8422_2325u64, |h, (k, t)| {
            let h = (h ^ crate::tensor::fnv1a(k.as_bytes())).wrapping_mul(0x0100_0000_01b3);
            (h ^ t.fingerprint()).wrapping_mul(0x0100_0000_01b3)
        })
    }

    /// Copy gradients from a finished backward pass into the bound tensors.
    pub fn absorb_grads(&mut self, grads: &Gradients, bindings: &Bindings) {
        for (name, &var) in &bindings.vars {
            if let Some(t) = self.tensors.get_mut(name) {
                grads.write_into(var, t);
            }
        }
    }
}

/// Parameter names recorded as tape leaves during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// A tape plus the parameter store it reads from.
pub struct Graph<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    bindings: Bindings,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bindings: Bindings::default(),
        }
    }

    /// Leaf for a named parameter, created once per graph.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bindings.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let v = self.tape.leaf(t);
        self.bindings.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bindings(&self) -> &Bindings {
        &self.bindings
    }

    pub fn into_parts(self) -> (Tape, Bindings) {
        (self.tape, self.bindings)
    }
}
