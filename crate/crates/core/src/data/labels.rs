//! Binary label matrices.

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// N x K binary label matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    entries: Vec<u8>,
    n: usize,
    k: usize,
}

impl LabelMatrix {
    pub fn new(n: usize, k: usize, entries: Vec<u8>) -> Result<Self> {
        if entries.len() != n * k {
            return Err(Error::shape(
                "label_matrix",
                format!("{} entries for {}x{}", entries.len(), n, k),
            ));
        }
        if let Some(bad) = entries.iter().find(|&&e| e > 1) {
            return Err(Error::Data(format!("label entry {} is not binary", bad)));
        }
        Ok(LabelMatrix { entries, n, k })
    }

    pub fn from_rows(rows: &[Vec<u8>], k: usize) -> Result<Self> {
        let mut entries = Vec::with_capacity(rows.len() * k);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::shape(
                    "label_matrix",
                    format!("row {} has {} entries, expected {}", i, r.len(), k),
                ));
            }
            entries.extend_from_slice(r);
        }
        Self::new(rows.len(), k, entries)
    }

    pub fn num_samples(&self) -> usize {
        self.n
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.entries[i * self.k..(i + 1) * self.k]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.k + j] == 1
    }

    /// Indices of the positive classes of row `i` (the paper's P_ml).
    pub fn positives(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == 1)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn positives_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&y| y == 1).count()
    }

    pub fn class_positive_count(&self, j: usize) -> usize {
        (0..self.n).filter(|&i| self.get(i, j)).count()
    }

    pub fn is_single_label(&self) -> bool {
        (0..self.n).all(|i| self.positives_count(i) == 1)
    }

    /// Float copy for the normal equations.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let values: Vec<F> = self
            .entries
            .iter()
            .map(|&e| if e == 1 { F::ONE } else { F::ZERO })
            .collect();
        Tensor::new(vec![self.n, self.k], values).expect("dims validated at construction")
    }
}
