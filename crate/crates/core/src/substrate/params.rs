use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Var};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub tensor: Arc<Tensor<F>>,
    pub trainable: bool,
}

/// Named parameters with per-name trainable flags, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, ParamEntry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, ParamEntry { tensor: Arc::new(tensor), trainable });
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor<F>, trainable: bool) {
        self.entries.insert(name.into(), ParamEntry { tensor: Arc::new(tensor), trainable });
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry<F>> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<F>>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.entries.get(name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.entries
            .get_mut(name)
            .map(|e| Arc::make_mut(&mut e.tensor))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    /// Sets every flag from a predicate on the name.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, e) in self.entries.iter_mut() {
            e.trainable = pred(name);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<F>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_where(&self, pred: impl Fn(&str, &ParamEntry<F>) -> bool) -> usize {
        self.entries.iter().filter(|(n, e)| pred(n, e)).map(|(_, e)| e.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count_where(|_, e| e.trainable)
    }

    pub fn total_count(&self) -> usize {
        self.count_where(|_, _| true)
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| (n.clone(), ParamEntry { tensor: Arc::new(e.tensor.cast()), trainable: e.trainable }))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and values of the selected parameters.
    pub fn hash_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, e) in self.entries.iter().filter(|(n, _)| pred(n)) {
            h.update(name.as_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-parameter hashes, for pinpointing which tensors changed.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.entries.keys().map(|n| (n.clone(), self.hash_where(|m| m == n))).collect()
    }
}

/// Maps parameter names to graph leaves for one forward pass. Each
/// parameter becomes exactly one leaf no matter how often it is used.
pub struct Binder<'p, F> {
    params: &'p ParamStore<F>,
    vars: BTreeMap<String, Var>,
    frozen_all: bool,
}

impl<'p, F: Real> Binder<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self { params, vars: BTreeMap::new(), frozen_all: false }
    }

    /// A binder that never requests gradients (inference).
    pub fn frozen(params: &'p ParamStore<F>) -> Self {
        Self { params, vars: BTreeMap::new(), frozen_all: true }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph<F>, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let e = self.params.entry(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let v = g.leaf(e.tensor.clone(), e.trainable && !self.frozen_all);
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Gradients of all bound trainable parameters (absent ones are omitted).
    pub fn collect(&self, grads: &mut Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.vars
            .iter()
            .filter(|(n, _)| self.params.is_trainable(n))
            .filter_map(|(n, &v)| grads.take(v).map(|t| (n.clone(), t)))
            .collect()
    }
}
