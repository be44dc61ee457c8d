use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::tensor::{Shape, Tensor};
use crate::{NnError, Result};

/// Named parameter tensors, ordered by name so iteration is deterministic.
///
/// Values are reference counted; binding a parameter into a [`crate::Graph`]
/// does not copy it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(Arc::as_ref)
    }

    pub fn get_arc(&self, name: &str) -> Option<Arc<Tensor>> {
        self.tensors.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name).map(|a| Arc::try_unwrap(a).unwrap_or_else(|a| (*a).clone()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Copies every tensor whose name starts with `prefix` into `self`.
    pub fn extend_prefixed(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in &other.tensors {
            if k.starts_with(prefix) {
                self.tensors.insert(k.clone(), Arc::clone(v));
            }
        }
    }

    /// A new store holding only the tensors under `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        out.extend_prefixed(self, prefix);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }
}

/// Fills a store with freshly initialized tensors.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Convolution weight `[out, in, k, k]` with fan-in scaled normal init,
    /// plus a zero bias `[1, out, 1, 1]`.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, gain: f32) {
        let fan_in = (c_in * k * k) as f32;
        let w = Tensor::randn([c_out, c_in, k, k], gain / fan_in.sqrt(), self.rng);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Tensor::zeros([1, c_out, 1, 1]));
    }

    /// A convolution whose weight and bias start at exactly zero.
    pub fn zero_conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        self.store.insert(format!("{name}.weight"), Tensor::zeros([c_out, c_in, k, k]));
        self.store.insert(format!("{name}.bias"), Tensor::zeros([1, c_out, 1, 1]));
    }

    pub fn norm(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::full([1, c, 1, 1], 1.0));
        self.store.insert(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]));
    }

    pub fn tensor(&mut self, name: &str, shape: Shape, value: f32) {
        self.store.insert(name.to_string(), Tensor::full(shape, value));
    }
}
