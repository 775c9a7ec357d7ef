use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional accumulated gradient.
///
/// Tape operations work on two-dimensional tensors; vectors are `1 × n`
/// and scalars are `1 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    values.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn row(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![1, n], values)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            values: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            values: vec![0.0; rows * cols],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of rows when viewed as a matrix (leading dimensions collapsed).
    pub fn rows(&self) -> usize {
        self.values.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is nonempty")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.values.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
