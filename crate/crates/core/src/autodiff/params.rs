use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub frozen: bool,
}

/// Named trainable tensors with their accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

/// Per-parameter gradients produced by one backward pass.
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                grad,
                frozen: false,
            },
        );
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.remove(name).map(|e| e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        self.entry(name).map(|e| &e.grad)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{name}: {:?} vs {:?}", entry.value.shape(), value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_none_or(|e| e.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.frozen = frozen)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Freezes every entry whose name does not start with one of `prefixes`.
    pub fn freeze_all_except(&mut self, prefixes: &[&str]) {
        for (name, entry) in &mut self.entries {
            entry.frozen = !prefixes.iter().any(|p| name.starts_with(p));
        }
    }

    pub fn freeze_all(&mut self) {
        self.freeze_all_except(&[]);
    }

    pub fn unfreeze_all(&mut self) {
        for entry in self.entries.values_mut() {
            entry.frozen = false;
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `grads` into the stored gradients. Unknown names are an error.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        for (name, g) in grads {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if entry.grad.shape() != g.shape() {
                return Err(Error::shape(
                    "accumulate",
                    format!("{name}: {:?} vs {:?}", entry.grad.shape(), g.shape()),
                ));
            }
            for (a, &b) in entry.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: T) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn values(&self) -> BTreeMap<String, Tensor<T>> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.value.clone())).collect()
    }

    pub fn from_values(values: BTreeMap<String, Tensor<T>>) -> Self {
        let mut store = Self::new();
        for (k, v) in values {
            store.insert(k, v);
        }
        store
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            out.insert(name.clone(), e.value.cast());
            out.entries.get_mut(name).unwrap().frozen = e.frozen;
        }
        out
    }
}
