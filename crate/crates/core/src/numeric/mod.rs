//! Dense tensors, tape-based reverse-mode differentiation, parameters,
//! the Adam optimizer, and a finite-difference gradient oracle.

mod gradcheck;
mod optim;
mod params;
pub mod sparse;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, gradient_pair, GradCheck};
pub use optim::{OptimizerState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use params::ParameterSet;
pub use sparse::{Csr, Segments, SparseMatrix};
pub use tape::{bce_value, sigmoid, OpKind, Reduce, Tape, Var, ATTENTION_LEAKY_SLOPE, BCE_CLAMP};
pub use tensor::Tensor;
