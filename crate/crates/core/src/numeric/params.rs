use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors keyed by dot-separated path.
///
/// Backed by a `BTreeMap`, so iteration is lexicographic by path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(Error::Contract(format!("duplicate parameter path `{path}`")));
        }
        self.tensors.insert(path, tensor.with_requires_grad(true));
        Ok(())
    }

    /// Inserts a `rows × cols` matrix drawn from the Glorot-uniform range.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        path: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<()> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        self.insert_uniform(path, rows, cols, limit, rng)
    }

    pub fn insert_uniform<R: Rng>(
        &mut self,
        path: &str,
        rows: usize,
        cols: usize,
        limit: f64,
        rng: &mut R,
    ) -> Result<()> {
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::Contract(format!("uniform range for `{path}`: {e}")))?;
        let values = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.insert(path, Tensor::matrix(rows, cols, values)?)
    }

    pub fn insert_zeros(&mut self, path: &str, rows: usize, cols: usize) -> Result<()> {
        self.insert(path, Tensor::zeros(rows, cols))
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn require(&self, path: &str) -> Result<&Tensor> {
        self.get(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{path}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_rejected_and_order_is_lexicographic() {
        let mut p = ParameterSet::new();
        p.insert_zeros("b.weight", 1, 1).unwrap();
        p.insert_zeros("a.weight", 1, 1).unwrap();
        p.insert_zeros("a.bias", 1, 1).unwrap();
        assert!(p.insert_zeros("a.bias", 1, 1).is_err());
        let paths: Vec<_> = p.paths().collect();
        assert_eq!(paths, ["a.bias", "a.weight", "b.weight"]);
        assert!(p.iter().all(|(_, t)| t.requires_grad()));
    }
}
