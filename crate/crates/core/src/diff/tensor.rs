//! Dense row-major tensors.
//!
//! Rank 0 (scalar, empty shape), rank 1 (vector) and rank 2 (matrix) cover
//! everything the encoders and losses need. Tensors are immutable once
//! handed to a [`crate::diff::Tape`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} values, got {}", shape, numel, values.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor { shape, values, requires_grad: false })
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![], values: vec![v], requires_grad: false }
    }

    pub fn vector(values: Vec<F>) -> Self {
        Tensor { shape: vec![values.len()], values, requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<F>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("tensor", "ragged rows".to_string()));
        }
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            values.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![F::ZERO; numel], requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor (1 for scalars and vectors).
    pub fn nrows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a rank-2 tensor; length for vectors; 1 for scalars.
    pub fn ncols(&self) -> usize {
        match self.rank() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    /// The single value of a rank-0 tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    pub fn get2(&self, r: usize, c: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.values[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.values[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// L2 norm of all entries.
    pub fn frobenius_norm(&self) -> F {
        self.values.iter().fold(F::ZERO, |acc, &v| acc + v * v).sqrt()
    }
}
