use std::collections::{BTreeMap, BTreeSet};

use crate::error::{DiffError, Result};
use crate::tensor::{Real, Tensor};

/// Named parameters with a frozen set. Frozen entries are bound into graphs
/// as constants, so they never receive gradients or optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing entry, keeping its frozen flag.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                *slot = tensor;
                Ok(())
            }
            None => Err(DiffError::UnknownParam(name.to_string())),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.frozen.remove(name);
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.contains(name) {
            return Err(DiffError::UnknownParam(name.to_string()));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn unfreeze(&mut self, name: &str) {
        self.frozen.remove(name);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| !self.frozen.contains(*n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }
}

/// Sum-accumulated gradients keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for Gradients<T> {
    fn default() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.map.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(DiffError::shape("accumulate", acc.shape(), g.shape()));
                    }
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn zero(&mut self) {
        self.map.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(&[2])),
            Err(DiffError::DuplicateParam(_))
        ));
    }

    #[test]
    fn accumulate_sums() {
        let mut a = Gradients::<f64>::new();
        a.insert("w", Tensor::row(vec![1.0, 2.0]));
        let mut b = Gradients::new();
        b.insert("w", Tensor::row(vec![0.5, 0.5]));
        b.insert("v", Tensor::row(vec![3.0]));
        a.accumulate(&b).unwrap();
        assert_eq!(a.get("w").unwrap().data(), &[1.5, 2.5]);
        assert_eq!(a.get("v").unwrap().data(), &[3.0]);
    }
}
