//! Feature tokenizer: one affine map per vital sign plus a learned embedding
//! that stands in for a missing measurement.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{ParameterSet, Tape, Var};

pub const FT_WEIGHT: &str = "ft.weight";
pub const FT_BIAS: &str = "ft.bias";
pub const FT_MISSING: &str = "ft.missing";

/// Adds `ft.weight`, `ft.bias` and `ft.missing`, each `n_vs × d`.
///
/// Weights and missing embeddings are uniform in `±1/√d`, biases start at 0.
pub fn init_tokenizer<R: Rng>(params: &mut ParameterSet, n_vs: usize, d: usize, rng: &mut R) -> Result<()> {
    let limit = 1.0 / (d as f64).sqrt();
    params.insert_uniform(FT_WEIGHT, n_vs, d, limit, rng)?;
    params.insert_zeros(FT_BIAS, n_vs, d)?;
    params.insert_uniform(FT_MISSING, n_vs, d, limit, rng)
}

/// Tokenizes `steps × n_vs` row-major values into `(steps · n_vs) × d`.
///
/// `missing[i]` marks entry `i` as unobserved; its value is ignored.
pub fn feature_tokenize(
    tape: &mut Tape,
    params: &ParameterSet,
    x: &[f64],
    missing: &[bool],
) -> Result<Var> {
    if x.len() != missing.len() {
        return Err(Error::shape(
            "feature-tokenize",
            format!("{} values vs {} mask entries", x.len(), missing.len()),
        ));
    }
    let present: Vec<bool> = missing.iter().map(|m| !m).collect();
    tokenize_present(tape, params, Arc::new(x.to_vec()), Arc::new(present))
}

pub(crate) fn tokenize_present(
    tape: &mut Tape,
    params: &ParameterSet,
    x: Arc<Vec<f64>>,
    present: Arc<Vec<bool>>,
) -> Result<Var> {
    let w = tape.param(params, FT_WEIGHT)?;
    let b = tape.param(params, FT_BIAS)?;
    let m = tape.param(params, FT_MISSING)?;
    tape.tokenize(w, b, m, x, present)
}
