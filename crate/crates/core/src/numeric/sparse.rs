//! Constant sparse structures consumed by graph operations on the tape.

use crate::error::{Error, Result};

/// Compressed sparse row pattern: for row `r` the column indices are
/// `indices[offsets[r]..offsets[r + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Csr {
    /// Builds a pattern from per-row column lists.
    pub fn from_rows(cols: usize, rows: &[Vec<usize>]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for row in rows {
            if let Some(&bad) = row.iter().find(|&&c| c >= cols) {
                return Err(Error::shape(
                    "csr",
                    format!("column {bad} out of range for {cols} columns"),
                ));
            }
            indices.extend_from_slice(row);
            offsets.push(indices.len());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            offsets,
            indices,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Range of entry positions belonging to `row`.
    pub fn row_range(&self, row: usize) -> std::ops::Range<usize> {
        self.offsets[row]..self.offsets[row + 1]
    }

    pub fn row_indices(&self, row: usize) -> &[usize] {
        &self.indices[self.row_range(row)]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Row index of every stored entry, in storage order.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            out.extend(std::iter::repeat_n(r, self.offsets[r + 1] - self.offsets[r]));
        }
        out
    }
}

/// A sparse matrix with constant weights over a [`Csr`] pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pattern: Csr,
    weights: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(pattern: Csr, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != pattern.nnz() {
            return Err(Error::shape(
                "sparse",
                format!("{} weights for {} entries", weights.len(), pattern.nnz()),
            ));
        }
        Ok(Self { pattern, weights })
    }

    pub fn pattern(&self) -> &Csr {
        &self.pattern
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Contiguous row segments: segment `s` covers rows `bounds[s]..bounds[s + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    bounds: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut bounds = Vec::with_capacity(lengths.len() + 1);
        bounds.push(0);
        let mut acc = 0;
        for &l in lengths {
            acc += l;
            bounds.push(acc);
        }
        Self { bounds }
    }

    pub fn count(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn total_rows(&self) -> usize {
        *self.bounds.last().expect("bounds nonempty")
    }

    pub fn range(&self, segment: usize) -> std::ops::Range<usize> {
        self.bounds[segment]..self.bounds[segment + 1]
    }
}
