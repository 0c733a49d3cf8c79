//! Named parameter storage with deterministic iteration order.

use indexmap::IndexMap;
use ndarray::ArrayD;

use super::scalar::Scalar;
use crate::error::{Result, SorcenError};

pub struct Param<T> {
    pub values: ArrayD<T>,
    pub grad: ArrayD<T>,
}

/// Insertion-ordered map of named parameter tensors. Iteration order is
/// stable across runs given the same insertion sequence, which keeps
/// optimizer traversal and checkpoints reproducible.
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, values: ArrayD<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(SorcenError::invalid(format!("duplicate parameter name {name:?}")));
        }
        let grad = ArrayD::zeros(values.raw_dim());
        self.entries.insert(name, Param { values, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Convert every parameter (values only) to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            let values = p.values.mapv(|v| U::of_f64(v.as_f64()));
            out.insert(name, values).expect("names unique by construction");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn iteration_follows_insertion_order() {
        let mut store = ParamStore::<f64>::new();
        for name in ["zeta", "alpha", "mid"] {
            store.insert(name, ArrayD::zeros(vec![2])).unwrap();
        }
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, vec!["zeta", "alpha", "mid"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", ArrayD::zeros(vec![1])).unwrap();
        assert!(store.insert("w", ArrayD::zeros(vec![1])).is_err());
    }
}
