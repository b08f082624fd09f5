//! Ordered name -> tensor containers for model parameters and gradients.
//!
//! Both model parameters and captured gradient sets share one layout: a
//! fixed, insertion-ordered list of named tensors. Order matters — per-layer
//! losses iterate pairs positionally, serialized files must be byte-stable
//! across runs, and a gradient set is valid exactly when its layout matches
//! the parameters it was taken from.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("entry {index}: name {a:?} vs {b:?}")]
    NameMismatch { index: usize, a: String, b: String },
    #[error("entry {index} ({name}): shape {a:?} vs {b:?}")]
    ShapeMismatch { index: usize, name: String, a: Vec<usize>, b: Vec<usize> },
    #[error("entry count {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("no entry named {0:?}")]
    Missing(String),
}

/// Insertion-ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TensorMap {
    entries: Vec<(String, Tensor)>,
}

/// Model parameters keyed by layer-qualified names.
pub type ModelParams = TensorMap;
/// One gradient tensor per parameter tensor, same names and order.
pub type GradientSet = TensorMap;

impl TensorMap {
    pub fn new() -> Self {
        TensorMap { entries: Vec::new() }
    }

    /// Appends an entry. Names must be unique; a duplicate is a programming
    /// error in layout construction, hence a panic.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate tensor name {name:?}");
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, LayoutError> {
        self.get(name).ok_or_else(|| LayoutError::Missing(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_same_layout(&self, other: &TensorMap) -> Result<(), LayoutError> {
        if self.len() != other.len() {
            return Err(LayoutError::LengthMismatch { a: self.len(), b: other.len() });
        }
        for (i, ((na, ta), (nb, tb))) in self.entries.iter().zip(&other.entries).enumerate() {
            if na != nb {
                return Err(LayoutError::NameMismatch { index: i, a: na.clone(), b: nb.clone() });
            }
            if ta.shape != tb.shape {
                return Err(LayoutError::ShapeMismatch {
                    index: i,
                    name: na.clone(),
                    a: ta.shape.clone(),
                    b: tb.shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Elementwise combination of two layout-compatible maps.
    pub fn zip_map(
        &self,
        other: &TensorMap,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<TensorMap, LayoutError> {
        self.check_same_layout(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| {
                let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
                (n.clone(), Tensor::new(a.shape.clone(), data))
            })
            .collect();
        Ok(TensorMap { entries })
    }

    pub fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> TensorMap {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                (n.clone(), Tensor::new(t.shape.clone(), t.data.iter().map(|&x| f(x)).collect()))
            })
            .collect();
        TensorMap { entries }
    }
}
