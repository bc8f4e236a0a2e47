//! Named, ordered collection of trainable tensors.

use crate::numgrad::{Graph, Mat, Var};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|m| g.leaf(m.clone())).collect()
    }

    /// Registers every tensor as a constant (inference, or frozen evaluation).
    pub fn constants(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|m| g.constant(m.clone())).collect()
    }
}
