//! Dense f64 tensors with row-major storage.
//!
//! Shapes follow a small set of conventions used throughout the crate:
//! a scalar has shape `[]`, a vector `[n]`, and a matrix `[rows, cols]`.
//! Everything numeric in the workspace is f64; reconstruction quality at
//! small scale is precision-bound, so there is deliberately no f32 path.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A plain tensor value: shape plus row-major data.
///
/// `Tensor` is the storage/serialization type. Differentiable computation
/// happens on [`crate::tape::Tape`] nodes, which hold their values in the
/// same layout and convert to and from `Tensor` freely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data buffer.
    ///
    /// Panics if the element count implied by `shape` disagrees with
    /// `data.len()`; this is a programming error, not an input error.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![1.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Standard-normal entries scaled by `std`, drawn in row-major order.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.data.len() == 1, "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows/cols of a matrix; vectors count as one row, scalars as 1x1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on rank-{} tensor", self.shape.len()),
        }
    }

    /// Matrix element accessor for tests and small glue code.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    /// Euclidean norm of the whole buffer.
    pub fn l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_and_accessors() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.dims2(), (2, 3));
        assert_eq!(t.at(1, 2), 6.0);
        assert!(!t.is_scalar());
        assert!(Tensor::scalar(4.0).is_scalar());
        assert_eq!(Tensor::scalar(4.0).item(), 4.0);
    }

    #[test]
    #[should_panic(expected = "implies")]
    fn shape_data_mismatch_panics() {
        Tensor::new(vec![2, 2], vec![0.0; 3]);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::randn(vec![4, 4], 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Tensor::randn(vec![4, 4], 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn l2_is_pythagorean() {
        let t = Tensor::new(vec![2], vec![3.0, 4.0]);
        assert!((t.l2() - 5.0).abs() < 1e-12);
    }
}
