//! Dense row-major tensors over a [`Scalar`] type.
//!
//! Shapes are plain extent lists: `[]` is a scalar, `[n]` a vector, `[n, m]` a
//! matrix. Values admitted into a computation graph must be finite; the
//! checked constructors enforce that at the boundary.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

/// Dense tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Checked constructor: shape/data agreement and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    /// Constructor for internally produced values; skips the finiteness scan.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Build an `[n, m]` matrix from row slices.
    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        debug_assert!(rows.iter().all(|r| r.len() == m));
        let mut data = Vec::with_capacity(n * m);
        for row in rows {
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![n, m],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Row count of a matrix (or length of a vector).
    pub fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [n, _] => *n,
            [n] => *n,
            _ => panic!("rows() on tensor of rank {}", self.rank()),
        }
    }

    /// Column count of a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.as_slice() {
            [_, m] => *m,
            _ => panic!("cols() on tensor of rank {}", self.rank()),
        }
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn scalar_value(&self) -> S {
        debug_assert!(self.data.len() == 1);
        self.data[0]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert_eq!(self.rank(), 2);
        let m = self.shape[1];
        self.data[r * m + c] = v;
    }

    /// Row `r` of a matrix as a slice.
    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        debug_assert_eq!(self.rank(), 2);
        let m = self.shape[1];
        &self.data[r * m..(r + 1) * m]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        debug_assert_eq!(self.rank(), 2);
        let m = self.shape[1];
        &mut self.data[r * m..(r + 1) * m]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += scale * other`, elementwise over identical shapes.
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Convert element type, e.g. for serialization through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::of(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape() {
        let err = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::<f64>::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1 }));
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(t.at(1, 0), 3.0);
        assert_eq!(t.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn scalar_shape_is_empty() {
        let t = Tensor::scalar(5.0f64);
        assert!(t.is_scalar());
        assert_eq!(t.len(), 1);
    }
}
