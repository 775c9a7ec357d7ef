//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node holding its output value and enough
//! context to compute the vector-Jacobian product later. A tape records one
//! forward pass; [`Tape::backward`] propagates from a scalar loss, writes
//! parameter gradients into a [`ParameterSet`], and leaves the tape spent.
//! Call [`Tape::reset`] (or make a new tape) before the next forward pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::sparse::{Csr, Segments, SparseMatrix};
use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Slope used by the attention nonlinearity.
pub const ATTENTION_LEAKY_SLOPE: f64 = 0.2;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Reduction applied by row-wise and segment-wise reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// The operation kinds reachable through [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Multiply,
    ConcatRows,
    RowSoftmax,
    Sigmoid,
    Tanh,
    Relu,
    /// Leaky ReLU with [`ATTENTION_LEAKY_SLOPE`].
    LeakyRelu,
    SumRows,
    MeanRows,
    MaxRows,
    SliceRows { start: usize, end: usize },
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RowSoftmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Reduce {
        input: Var,
        segments: Arc<Segments>,
        mode: Reduce,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SpMM(Arc<SparseMatrix>, Var),
    EdgeScores(Var, Var, Arc<Csr>),
    EdgeSoftmax(Var, Arc<Csr>),
    EdgeAggregate(Var, Var, Arc<Csr>),
    Tokenize {
        weight: Var,
        bias: Var,
        missing: Var,
        x: Arc<Vec<f64>>,
        present: Arc<Vec<bool>>,
    },
    Bce(Var, Arc<Vec<f64>>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node so the tape can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.spent = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Copies the value of `v` out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shapes are valid")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn check_live(&self) -> Result<()> {
        if self.spent {
            return Err(Error::TapeState(
                "tape already consumed by backward; reset before recording".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param => true,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (non-differentiable) matrix.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.values().to_vec(), Op::Constant)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows == 0 || cols == 0 || rows * cols != values.len() {
            return Err(Error::shape(
                "constant",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        Ok(self.push(rows, cols, values, Op::Constant))
    }

    /// Binds a parameter from `params` as a differentiable leaf. Binding the
    /// same path twice returns the same handle.
    pub fn param(&mut self, params: &ParameterSet, path: &str) -> Result<Var> {
        self.check_live()?;
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let t = params.require(path)?;
        let v = self.push(t.rows(), t.cols(), t.values().to_vec(), Op::Param);
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    /// Generic entry point over the core operation kinds.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Contract(format!(
                    "{kind:?} takes {n} input(s), got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Multiply => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::RowSoftmax => arity(1).and_then(|_| self.row_softmax(inputs[0])),
            OpKind::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            OpKind::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::LeakyRelu => {
                arity(1).and_then(|_| self.leaky_relu(inputs[0], ATTENTION_LEAKY_SLOPE))
            }
            OpKind::SumRows => arity(1).and_then(|_| self.reduce_rows(inputs[0], Reduce::Sum)),
            OpKind::MeanRows => arity(1).and_then(|_| self.reduce_rows(inputs[0], Reduce::Mean)),
            OpKind::MaxRows => arity(1).and_then(|_| self.reduce_rows(inputs[0], Reduce::Max)),
            OpKind::SliceRows { start, end } => {
                arity(1).and_then(|_| self.slice_rows(inputs[0], start, end))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("left is {m}x{k}, right is {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.values(a), self.values(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// Elementwise sum; `b` may also be a `1 × cols` row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ca != cb || (rb != ra && rb != 1) {
            return Err(Error::shape(
                "add",
                format!("cannot add {rb}x{cb} to {ra}x{ca}"),
            ));
        }
        let bv = self.values(b);
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + if rb == 1 { bv[i % ca] } else { bv[i] })
            .collect();
        Ok(self.push(ra, ca, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.values(a), self.values(b), |x, y| x - y);
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_shape("multiply", a, b)?;
        let out = zip_map(self.values(a), self.values(b), |x, y| x * y);
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_live()?;
        let out = self.values(a).iter().map(|x| x * factor).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, out, Op::Scale(a, factor)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain {
                op: "concat-rows",
                detail: "no inputs".into(),
            })?;
        let cols = self.dims(*first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape(
                    "concat-rows",
                    format!("column count {c} differs from {cols}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.values(p));
        }
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = parts.first().ok_or_else(|| Error::Domain {
            op: "concat-cols",
            detail: "no inputs".into(),
        })?;
        let rows = self.dims(*first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape(
                    "concat-cols",
                    format!("row count {r} differs from {rows}"),
                ));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.values(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check_live()?;
        let (r, c) = self.dims(a);
        if start >= end || end > r {
            return Err(Error::shape(
                "slice-rows",
                format!("range {start}..{end} invalid for {r} rows"),
            ));
        }
        let out = self.values(a)[start * c..end * c].to_vec();
        Ok(self.push(end - start, c, out, Op::SliceRows(a, start)))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check_live()?;
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::shape(
                "slice-cols",
                format!("range {start}..{end} invalid for {c} columns"),
            ));
        }
        let v = self.values(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        Ok(self.push(r, end - start, out, Op::SliceCols(a, start)))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let (r, c) = self.dims(a);
        let mut out = self.values(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(r, c, out, Op::RowSoftmax(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.values(a).iter().map(|&x| sigmoid(x)).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, out, Op::Sigmoid(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.values(a).iter().map(|x| x.tanh()).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, out, Op::Tanh(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.values(a).iter().map(|&x| x.max(0.0)).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, out, Op::Relu(a)))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.check_live()?;
        let out = self
            .values(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, out, Op::LeakyRelu(a, slope)))
    }

    /// Collapses the row axis: the result is `1 × cols`.
    pub fn reduce_rows(&mut self, a: Var, mode: Reduce) -> Result<Var> {
        let rows = self.dims(a).0;
        self.reduce_segments(a, Arc::new(Segments::from_lengths(&[rows])), mode)
    }

    /// Reduces each row segment to one row: the result is `segments × cols`.
    pub fn reduce_segments(&mut self, a: Var, segments: Arc<Segments>, mode: Reduce) -> Result<Var> {
        self.check_live()?;
        let (r, c) = self.dims(a);
        let op = match mode {
            Reduce::Sum => "sum-rows",
            Reduce::Mean => "mean-rows",
            Reduce::Max => "max-rows",
        };
        if segments.total_rows() != r {
            return Err(Error::shape(
                op,
                format!("segments cover {} rows, input has {r}", segments.total_rows()),
            ));
        }
        let v = self.values(a);
        let n = segments.count();
        let mut out = vec![0.0; n * c];
        let mut argmax = Vec::new();
        if mode == Reduce::Max {
            argmax = vec![0; n * c];
        }
        for s in 0..n {
            let range = segments.range(s);
            if range.is_empty() {
                return Err(Error::Domain {
                    op,
                    detail: format!("segment {s} has no rows"),
                });
            }
            let len = range.len() as f64;
            let dst = &mut out[s * c..(s + 1) * c];
            match mode {
                Reduce::Sum | Reduce::Mean => {
                    for i in range {
                        dst.iter_mut()
                            .zip(&v[i * c..(i + 1) * c])
                            .for_each(|(d, x)| *d += x);
                    }
                    if mode == Reduce::Mean {
                        dst.iter_mut().for_each(|d| *d /= len);
                    }
                }
                Reduce::Max => {
                    let first = range.start;
                    dst.copy_from_slice(&v[first * c..(first + 1) * c]);
                    let am = &mut argmax[s * c..(s + 1) * c];
                    am.iter_mut().for_each(|a| *a = first);
                    for i in range.skip(1) {
                        for j in 0..c {
                            if v[i * c + j] > dst[j] {
                                dst[j] = v[i * c + j];
                                am[j] = i;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            n,
            c,
            out,
            Op::Reduce {
                input: a,
                segments,
                mode,
                argmax,
            },
        ))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.values(a).iter().sum();
        Ok(self.push(1, 1, vec![s], Op::SumAll(a)))
    }

    /// Row `i` of the output is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        self.check_live()?;
        let (r, c) = self.dims(a);
        if indices.is_empty() {
            return Err(Error::Domain {
                op: "gather-rows",
                detail: "no indices".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather-rows",
                format!("index {bad} out of range for {r} rows"),
            ));
        }
        let v = self.values(a);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        Ok(self.push(indices.len(), c, out, Op::GatherRows(a, indices)))
    }

    /// Product of a constant sparse matrix with a dense tensor.
    pub fn spmm(&mut self, s: Arc<SparseMatrix>, a: Var) -> Result<Var> {
        self.check_live()?;
        let (r, c) = self.dims(a);
        let p = s.pattern();
        if p.cols() != r {
            return Err(Error::shape(
                "spmm",
                format!("sparse is {}x{}, dense has {r} rows", p.rows(), p.cols()),
            ));
        }
        let v = self.values(a);
        let w = s.weights();
        let mut out = vec![0.0; p.rows() * c];
        for row in 0..p.rows() {
            let dst = &mut out[row * c..(row + 1) * c];
            for e in p.row_range(row) {
                let j = p.indices()[e];
                let we = w[e];
                dst.iter_mut()
                    .zip(&v[j * c..(j + 1) * c])
                    .for_each(|(d, x)| *d += we * x);
            }
        }
        let rows = p.rows();
        Ok(self.push(rows, c, out, Op::SpMM(s, a)))
    }

    /// Per-entry score `src[row] + dst[col]` for every entry of `pattern`.
    /// `src` and `dst` are `n × 1` column vectors. Output is `nnz × 1`.
    pub fn edge_scores(&mut self, src: Var, dst: Var, pattern: Arc<Csr>) -> Result<Var> {
        self.check_live()?;
        let (rs, cs) = self.dims(src);
        let (rd, cd) = self.dims(dst);
        if cs != 1 || cd != 1 || rs != pattern.rows() || rd != pattern.cols() {
            return Err(Error::shape(
                "edge-scores",
                format!(
                    "need {}x1 and {}x1 score columns, got {rs}x{cs} and {rd}x{cd}",
                    pattern.rows(),
                    pattern.cols()
                ),
            ));
        }
        if pattern.nnz() == 0 {
            return Err(Error::Domain {
                op: "edge-scores",
                detail: "pattern has no entries".into(),
            });
        }
        let s = self.values(src);
        let t = self.values(dst);
        let mut out = Vec::with_capacity(pattern.nnz());
        for row in 0..pattern.rows() {
            for &col in pattern.row_indices(row) {
                out.push(s[row] + t[col]);
            }
        }
        let nnz = pattern.nnz();
        Ok(self.push(nnz, 1, out, Op::EdgeScores(src, dst, pattern)))
    }

    /// Softmax of `nnz × 1` entry scores within each pattern row.
    pub fn edge_softmax(&mut self, scores: Var, pattern: Arc<Csr>) -> Result<Var> {
        self.check_live()?;
        if self.dims(scores) != (pattern.nnz(), 1) {
            return Err(Error::shape(
                "edge-softmax",
                format!("scores {:?} vs {} entries", self.dims(scores), pattern.nnz()),
            ));
        }
        let mut out = self.values(scores).to_vec();
        for row in 0..pattern.rows() {
            softmax_in_place(&mut out[pattern.row_range(row)]);
        }
        let nnz = pattern.nnz();
        Ok(self.push(nnz, 1, out, Op::EdgeSoftmax(scores, pattern)))
    }

    /// `out[row] = Σ_e weights[e] · features[col(e)]` over the pattern row.
    pub fn edge_aggregate(&mut self, weights: Var, features: Var, pattern: Arc<Csr>) -> Result<Var> {
        self.check_live()?;
        let (rf, c) = self.dims(features);
        if self.dims(weights) != (pattern.nnz(), 1) || rf != pattern.cols() {
            return Err(Error::shape(
                "edge-aggregate",
                format!(
                    "weights {:?}, features {rf}x{c}, pattern {}x{} with {} entries",
                    self.dims(weights),
                    pattern.rows(),
                    pattern.cols(),
                    pattern.nnz()
                ),
            ));
        }
        let w = self.values(weights);
        let f = self.values(features);
        let mut out = vec![0.0; pattern.rows() * c];
        for row in 0..pattern.rows() {
            let dst = &mut out[row * c..(row + 1) * c];
            for e in pattern.row_range(row) {
                let j = pattern.indices()[e];
                let we = w[e];
                dst.iter_mut()
                    .zip(&f[j * c..(j + 1) * c])
                    .for_each(|(d, x)| *d += we * x);
            }
        }
        let rows = pattern.rows();
        Ok(self.push(rows, c, out, Op::EdgeAggregate(weights, features, pattern)))
    }

    /// Per-feature affine tokenization of an `steps × features` input.
    ///
    /// Row `t * features + j` of the output is `x[t,j] * weight[j] + bias[j]`
    /// when present and `missing[j]` otherwise. `weight`, `bias` and
    /// `missing` are `features × d`.
    pub fn tokenize(
        &mut self,
        weight: Var,
        bias: Var,
        missing: Var,
        x: Arc<Vec<f64>>,
        present: Arc<Vec<bool>>,
    ) -> Result<Var> {
        self.check_live()?;
        let (n, d) = self.dims(weight);
        if self.dims(bias) != (n, d) || self.dims(missing) != (n, d) {
            return Err(Error::shape(
                "tokenize",
                "weight, bias and missing tables must share a shape",
            ));
        }
        if x.len() != present.len() || x.is_empty() || x.len() % n != 0 {
            return Err(Error::shape(
                "tokenize",
                format!("{} values / {} mask entries for {n} features", x.len(), present.len()),
            ));
        }
        let (wv, bv, mv) = (self.values(weight), self.values(bias), self.values(missing));
        let mut out = Vec::with_capacity(x.len() * d);
        for (idx, (&xv, &p)) in x.iter().zip(present.iter()).enumerate() {
            let j = idx % n;
            let row = j * d..(j + 1) * d;
            if p {
                if !xv.is_finite() {
                    return Err(Error::Input(format!(
                        "non-finite value {xv} for present feature {j} at step {}",
                        idx / n
                    )));
                }
                out.extend(wv[row.clone()].iter().zip(&bv[row]).map(|(w, b)| xv * w + b));
            } else {
                out.extend_from_slice(&mv[row]);
            }
        }
        let rows = x.len();
        Ok(self.push(
            rows,
            d,
            out,
            Op::Tokenize {
                weight,
                bias,
                missing,
                x,
                present,
            },
        ))
    }

    /// Mean binary cross-entropy between probabilities and 0/1 labels.
    pub fn bce(&mut self, probs: Var, labels: Arc<Vec<f64>>) -> Result<Var> {
        self.check_live()?;
        let p = self.values(probs);
        if p.len() != labels.len() {
            return Err(Error::shape(
                "bce",
                format!("{} probabilities vs {} labels", p.len(), labels.len()),
            ));
        }
        let loss = bce_value(p, &labels);
        Ok(self.push(1, 1, vec![loss], Op::Bce(probs, labels)))
    }

    /// Propagates `∂loss/∂·` to every bound parameter, accumulating into the
    /// parameter gradients of `params`, then clears the tape.
    pub fn backward(&mut self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        self.check_live()?;
        if self.dims(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        let grads = self.gradients(loss);
        for (path, var) in &self.params {
            let g = grads[var.0]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.nodes[var.0].value.len()]);
            let t = params
                .get_mut(path)
                .ok_or_else(|| Error::Contract(format!("parameter `{path}` not in set")))?;
            if t.len() != g.len() {
                return Err(Error::shape(
                    "backward",
                    format!("parameter `{path}` changed size since binding"),
                ));
            }
            t.accumulate_grad(&g);
        }
        self.nodes.clear();
        self.params.clear();
        self.spent = true;
        Ok(())
    }

    fn gradients(&self, loss: Var) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            // Only leaf gradients are read afterwards.
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }
        grads
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.values(*a);
                let bv = self.values(*b);
                acc(*a, &mut |ga| {
                    // ga += g · bᵀ
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(gi, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // gb += aᵀ · g
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip != 0.0 {
                                axpy(a_ip, gi, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                let broadcast = self.dims(*b).0 == 1 && self.dims(*a).0 != 1;
                let c = self.dims(*b).1;
                acc(*b, &mut |gb| {
                    if broadcast {
                        for row in g.chunks(c) {
                            add_assign(gb, row);
                        }
                    } else {
                        add_assign(gb, g);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.values(*a), self.values(*b));
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |ga| axpy(*f, g, ga)),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    let slice = &g[offset..offset + len];
                    acc(*p, &mut |gp| add_assign(gp, slice));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut col_offset = 0;
                for p in parts {
                    let (r, c) = self.dims(*p);
                    acc(*p, &mut |gp| {
                        for i in 0..r {
                            add_assign(
                                &mut gp[i * c..(i + 1) * c],
                                &g[i * total + col_offset..i * total + col_offset + c],
                            );
                        }
                    });
                    col_offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.cols;
                acc(*a, &mut |ga| add_assign(&mut ga[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let c = self.dims(*a).1;
                let w = node.cols;
                acc(*a, &mut |ga| {
                    for i in 0..node.rows {
                        add_assign(&mut ga[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let c = node.cols;
                acc(*a, &mut |ga| {
                    for r in 0..node.rows {
                        softmax_backward(&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c], &mut ga[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.values(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.values(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += if x[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Reduce {
                input,
                segments,
                mode,
                argmax,
            } => {
                let c = node.cols;
                acc(*input, &mut |ga| {
                    for s in 0..segments.count() {
                        let gs = &g[s * c..(s + 1) * c];
                        let range = segments.range(s);
                        match mode {
                            Reduce::Sum => {
                                for i in range {
                                    add_assign(&mut ga[i * c..(i + 1) * c], gs);
                                }
                            }
                            Reduce::Mean => {
                                let inv = 1.0 / range.len() as f64;
                                for i in range {
                                    axpy(inv, gs, &mut ga[i * c..(i + 1) * c]);
                                }
                            }
                            Reduce::Max => {
                                for j in 0..c {
                                    ga[argmax[s * c + j] * c + j] += gs[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::GatherRows(a, indices) => {
                let c = node.cols;
                acc(*a, &mut |ga| {
                    for (i, &src) in indices.iter().enumerate() {
                        add_assign(&mut ga[src * c..(src + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::SpMM(s, a) => {
                let c = node.cols;
                let p = s.pattern();
                let w = s.weights();
                acc(*a, &mut |ga| {
                    for row in 0..p.rows() {
                        let gr = &g[row * c..(row + 1) * c];
                        for e in p.row_range(row) {
                            let j = p.indices()[e];
                            axpy(w[e], gr, &mut ga[j * c..(j + 1) * c]);
                        }
                    }
                });
            }
            Op::EdgeScores(src, dst, pattern) => {
                acc(*src, &mut |gs| {
                    for row in 0..pattern.rows() {
                        gs[row] += g[pattern.row_range(row)].iter().sum::<f64>();
                    }
                });
                acc(*dst, &mut |gd| {
                    for (e, &col) in pattern.indices().iter().enumerate() {
                        gd[col] += g[e];
                    }
                });
            }
            Op::EdgeSoftmax(scores, pattern) => {
                let y = &node.value;
                acc(*scores, &mut |gs| {
                    for row in 0..pattern.rows() {
                        let r = pattern.row_range(row);
                        softmax_backward(&y[r.clone()], &g[r.clone()], &mut gs[r]);
                    }
                });
            }
            Op::EdgeAggregate(weights, features, pattern) => {
                let c = node.cols;
                let w = self.values(*weights);
                let f = self.values(*features);
                acc(*weights, &mut |gw| {
                    for row in 0..pattern.rows() {
                        let gr = &g[row * c..(row + 1) * c];
                        for e in pattern.row_range(row) {
                            let j = pattern.indices()[e];
                            gw[e] += dot(gr, &f[j * c..(j + 1) * c]);
                        }
                    }
                });
                acc(*features, &mut |gf| {
                    for row in 0..pattern.rows() {
                        let gr = &g[row * c..(row + 1) * c];
                        for e in pattern.row_range(row) {
                            let j = pattern.indices()[e];
                            axpy(w[e], gr, &mut gf[j * c..(j + 1) * c]);
                        }
                    }
                });
            }
            Op::Tokenize {
                weight,
                bias,
                missing,
                x,
                present,
            } => {
                let (n, d) = self.dims(*weight);
                acc(*weight, &mut |gw| {
                    for (idx, (&xv, &p)) in x.iter().zip(present.iter()).enumerate() {
                        if p {
                            let j = idx % n;
                            axpy(xv, &g[idx * d..(idx + 1) * d], &mut gw[j * d..(j + 1) * d]);
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for (idx, &p) in present.iter().enumerate() {
                        if p {
                            let j = idx % n;
                            add_assign(&mut gb[j * d..(j + 1) * d], &g[idx * d..(idx + 1) * d]);
                        }
                    }
                });
                acc(*missing, &mut |gm| {
                    for (idx, &p) in present.iter().enumerate() {
                        if !p {
                            let j = idx % n;
                            add_assign(&mut gm[j * d..(j + 1) * d], &g[idx * d..(idx + 1) * d]);
                        }
                    }
                });
            }
            Op::Bce(probs, labels) => {
                let p = self.values(*probs);
                let inv_n = 1.0 / p.len() as f64;
                acc(*probs, &mut |gp| {
                    for i in 0..p.len() {
                        let pi = p[i];
                        if pi <= BCE_CLAMP || pi >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        let y = labels[i];
                        gp[i] += g[0] * inv_n * (-y / pi + (1.0 - y) / (1.0 - pi));
                    }
                });
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::EdgeScores(a, b, _) | Op::EdgeAggregate(a, b, _) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::RowSoftmax(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::SumAll(a)
        | Op::GatherRows(a, _)
        | Op::SpMM(_, a)
        | Op::EdgeSoftmax(a, _)
        | Op::Bce(a, _) => vec![*a],
        Op::Reduce { input, .. } => vec![*input],
        Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
        Op::Tokenize {
            weight,
            bias,
            missing,
            ..
        } => vec![*weight, *bias, *missing],
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`, accumulating into `out`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(a_ip, &b[p * n..(p + 1) * n], dst);
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

#[inline]
fn add_assign(y: &mut [f64], x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += x);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Independent lanes let the compiler vectorise the reduction.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let inner = dot(y, g);
    for i in 0..y.len() {
        out[i] += y[i] * (g[i] - inner);
    }
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_value(probs: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_set(entries: &[(&str, usize, usize, Vec<f64>)]) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (name, r, c, v) in entries {
            p.insert(*name, Tensor::matrix(*r, *c, v.clone()).unwrap())
                .unwrap();
        }
        p
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(&Tensor::identity(2));
        let x = tape.constant_matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let y = tape.forward_op(OpKind::MatMul, &[i, x]).unwrap();
        assert_eq!(tape.values(y), &[3.0, 4.0]);
        assert_eq!(tape.dims(y), (2, 1));
    }

    #[test]
    fn matmul_shape_mismatch_is_descriptive() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(2, 3));
        let b = tape.constant(&Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("2x3"), "{err}");
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::new();
        let x = tape.constant_matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = tape.forward_op(OpKind::RowSoftmax, &[x]).unwrap();
        assert_eq!(tape.values(y), &[0.5, 0.5]);
    }

    #[test]
    fn reductions_collapse_the_row_axis() {
        // Hand-reduced 3×4 oracle.
        let m = vec![
            1.0, -2.0, 0.5, 4.0, //
            3.0, 0.0, -1.0, 2.0, //
            -5.0, 7.0, 2.5, 4.0,
        ];
        let mut tape = Tape::new();
        let x = tape.constant_matrix(3, 4, m).unwrap();
        let s = tape.forward_op(OpKind::SumRows, &[x]).unwrap();
        let mean = tape.forward_op(OpKind::MeanRows, &[x]).unwrap();
        let max = tape.forward_op(OpKind::MaxRows, &[x]).unwrap();
        assert_eq!(tape.values(s), &[-1.0, 5.0, 2.0, 10.0]);
        assert_eq!(tape.values(mean), &[-1.0 / 3.0, 5.0 / 3.0, 2.0 / 3.0, 10.0 / 3.0]);
        assert_eq!(tape.values(max), &[3.0, 7.0, 2.5, 4.0]);

        let x2 = tape.constant_matrix(2, 2, vec![1.0, 5.0, 2.0, 3.0]).unwrap();
        let max2 = tape.forward_op(OpKind::MaxRows, &[x2]).unwrap();
        assert_eq!(tape.values(max2), &[2.0, 5.0]);
    }

    #[test]
    fn empty_concat_is_domain_error() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.concat_rows(&[]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn square_sum_gradient() {
        let mut params = param_set(&[("w", 1, 3, vec![1.0, 2.0, 3.0])]);
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get("w").unwrap().grad().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut params = param_set(&[("w", 1, 1, vec![0.0])]);
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let y = tape.sigmoid(w).unwrap();
        tape.backward(y, &mut params).unwrap();
        assert_eq!(params.get("w").unwrap().grad().unwrap(), &[0.25]);
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let mut params = param_set(&[("w", 1, 2, vec![1.0, 2.0])]);
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        assert!(matches!(
            tape.backward(w, &mut params),
            Err(Error::Contract(_))
        ));
        let loss = tape.sum_all(w).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert!(matches!(
            tape.backward(loss, &mut params),
            Err(Error::TapeState(_))
        ));
        assert!(tape.param(&params, "w").is_err());
        tape.reset();
        assert!(tape.param(&params, "w").is_ok());
    }

    #[test]
    fn bce_clamps_extremes() {
        let v = bce_value(&[0.0, 1.0], &[0.0, 1.0]);
        assert!(v < 1e-11);
        let v = bce_value(&[0.5, 0.5], &[1.0, 0.0]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_present_value_rejected_by_tokenizer() {
        let params = param_set(&[
            ("w", 1, 2, vec![1.0, 1.0]),
            ("b", 1, 2, vec![0.0, 0.0]),
            ("m", 1, 2, vec![0.0, 0.0]),
        ]);
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let b = tape.param(&params, "b").unwrap();
        let m = tape.param(&params, "m").unwrap();
        let bad = tape.tokenize(
            w,
            b,
            m,
            Arc::new(vec![f64::NAN]),
            Arc::new(vec![true]),
        );
        assert!(matches!(bad, Err(Error::Input(_))));
        let masked = tape
            .tokenize(w, b, m, Arc::new(vec![f64::NAN]), Arc::new(vec![false]))
            .unwrap();
        assert_eq!(tape.values(masked), &[0.0, 0.0]);
    }
}
