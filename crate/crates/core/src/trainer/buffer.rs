//! Ring buffer of detached embedding snapshots for prototype refits.

use crate::data::labels::LabelMatrix;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct RefitBuffer<F: Scalar> {
    dim: usize,
    num_classes: usize,
    capacity: usize,
    rows: Vec<(Vec<F>, Vec<u8>)>,
    /// Next slot to overwrite once the buffer is full.
    next: usize,
}

impl<F: Scalar> RefitBuffer<F> {
    pub fn new(capacity: usize, dim: usize, num_classes: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 || num_classes == 0 {
            return Err(Error::contract(
                "refit_buffer",
                format!("capacity {}, dim {}, classes {}", capacity, dim, num_classes),
            ));
        }
        Ok(RefitBuffer { dim, num_classes, capacity, rows: Vec::new(), next: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn next_slot(&self) -> usize {
        self.next
    }

    pub fn push(&mut self, embedding: Vec<F>, labels: &[u8]) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::shape(
                "refit_buffer",
                format!("embedding of {} values for dim {}", embedding.len(), self.dim),
            ));
        }
        if labels.len() != self.num_classes {
            return Err(Error::shape(
                "refit_buffer",
                format!("{} labels for {} classes", labels.len(), self.num_classes),
            ));
        }
        if self.rows.len() < self.capacity {
            self.rows.push((embedding, labels.to_vec()));
        } else {
            self.rows[self.next] = (embedding, labels.to_vec());
            self.next = (self.next + 1) % self.capacity;
        }
        Ok(())
    }

    /// Buffer contents as a stacked embedding matrix plus label matrix,
    /// in storage order.
    pub fn to_matrix(&self) -> Result<(Tensor<F>, LabelMatrix)> {
        if self.rows.is_empty() {
            return Err(Error::contract("refit_buffer", "buffer is empty"));
        }
        let mut values = Vec::with_capacity(self.rows.len() * self.dim);
        let mut entries = Vec::with_capacity(self.rows.len() * self.num_classes);
        for (e, l) in &self.rows {
            values.extend_from_slice(e);
            entries.extend_from_slice(l);
        }
        let z = Tensor::new(vec![self.rows.len(), self.dim], values)?;
        let labels = LabelMatrix::new(self.rows.len(), self.num_classes, entries)?;
        Ok((z, labels))
    }

    /// Raw rows in storage order, for serialization.
    pub fn rows(&self) -> &[(Vec<F>, Vec<u8>)] {
        &self.rows
    }

    /// Rebuild from serialized state.
    pub fn from_rows(
        capacity: usize,
        dim: usize,
        num_classes: usize,
        rows: Vec<(Vec<F>, Vec<u8>)>,
        next: usize,
    ) -> Result<Self> {
        let mut buf = RefitBuffer::new(capacity, dim, num_classes)?;
        if rows.len() > capacity {
            return Err(Error::contract(
                "refit_buffer",
                format!("{} rows exceed capacity {}", rows.len(), capacity),
            ));
        }
        if next >= capacity.max(1) {
            return Err(Error::contract("refit_buffer", format!("next slot {} out of range", next)));
        }
        for (e, l) in &rows {
            if e.len() != dim || l.len() != num_classes {
                return Err(Error::shape("refit_buffer", "row dimensions do not match"));
            }
        }
        buf.rows = rows;
        buf.next = next;
        Ok(buf)
    }
}
