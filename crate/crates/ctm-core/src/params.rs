//! Ordered, named parameter collections.
//!
//! Insertion order is fixed by model construction and drives checkpoint
//! layout, Adam state alignment, and gradient collection, which keeps
//! whole runs deterministic.

use crate::error::{CtmError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    /// Total number of scalar coordinates.
    pub fn coord_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Register every parameter as a graph leaf, in order.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    /// Precision conversion (exact for f32 -> f64).
    pub fn convert<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.convert()).collect(),
        }
    }

    /// FNV-1a hash over names, shapes, and raw value bits. Used to assert
    /// that evaluation never mutates parameters.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for (name, t) in self.iter() {
            for b in name.as_bytes() {
                eat(*b);
            }
            for &d in t.shape() {
                for b in (d as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for v in t.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// Gradients aligned with a [`ParamSet`], zero-filled where a parameter
/// received no gradient.
pub fn collect_grads<T: Real>(
    g: &Graph<T>,
    params: &ParamSet<T>,
    vars: &[Var],
) -> Result<Vec<Tensor<T>>> {
    if vars.len() != params.len() {
        return Err(CtmError::contract(format!(
            "collect_grads: {} vars for {} params",
            vars.len(),
            params.len()
        )));
    }
    Ok(vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            g.grad(v)
                .unwrap_or_else(|| Tensor::zeros(params.tensor(i).shape().to_vec()))
        })
        .collect())
}
