//! Recurrent cell over step embeddings and the per-task prediction head.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParameterSet, Tape, Var};

pub const DEFAULT_HIDDEN: usize = 100;
/// Mortality is predicted from the state after this many hourly steps.
pub const MORTALITY_HOURS: usize = 48;
pub const PHENOTYPE_COUNT: usize = 25;

pub const LSTM_W_INPUT: &str = "lstm.w_input";
pub const LSTM_W_HIDDEN: &str = "lstm.w_hidden";
pub const LSTM_BIAS: &str = "lstm.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mortality,
    Decompensation,
    Phenotyping,
}

impl TaskKind {
    pub fn out_dim(self) -> usize {
        match self {
            Self::Mortality | Self::Decompensation => 1,
            Self::Phenotyping => PHENOTYPE_COUNT,
        }
    }

    /// Key used in episode files and configs.
    pub fn key(self) -> &'static str {
        match self {
            Self::Mortality => "mortality",
            Self::Decompensation => "decompensation",
            Self::Phenotyping => "phenotyping",
        }
    }

    /// Number of steps the model consumes from a `len`-step episode.
    pub fn steps_used(self, len: usize) -> Result<usize> {
        match self {
            Self::Mortality if len < MORTALITY_HOURS => Err(Error::Eligibility(format!(
                "mortality needs {MORTALITY_HOURS} steps, episode has {len}"
            ))),
            Self::Mortality => Ok(MORTALITY_HOURS),
            _ if len == 0 => Err(Error::Eligibility("episode has no steps".into())),
            _ => Ok(len),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mortality" | "ihm" => Ok(Self::Mortality),
            "decompensation" | "decomp" => Ok(Self::Decompensation),
            "phenotyping" | "pheno" => Ok(Self::Phenotyping),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (mortality | decomp | pheno)"
            ))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// LSTM with gates packed `[input, forget, candidate, output]` along columns:
/// `lstm.w_input` is `d × 4h`, `lstm.w_hidden` `h × 4h`, `lstm.bias` `1 × 4h`.
pub fn init_recurrent<R: Rng>(params: &mut ParameterSet, input_dim: usize, hidden: usize, rng: &mut R) -> Result<()> {
    params.insert_glorot(LSTM_W_INPUT, input_dim, 4 * hidden, rng)?;
    params.insert_glorot(LSTM_W_HIDDEN, hidden, 4 * hidden, rng)?;
    params.insert_zeros(LSTM_BIAS, 1, 4 * hidden)
}

/// Runs the cell over the rows of `steps` (`T × d`) from a zero state and
/// returns every hidden state as `T × h`.
pub fn recurrent_forward(tape: &mut Tape, params: &ParameterSet, steps: Var) -> Result<Var> {
    let (t_len, d) = tape.dims(steps);
    let w_in = params.require(LSTM_W_INPUT)?;
    if w_in.rows() != d {
        return Err(Error::Contract(format!(
            "recurrent input has dimension {d}, cell expects {}",
            w_in.rows()
        )));
    }
    let h = w_in.cols() / 4;
    let wx = tape.param(params, LSTM_W_INPUT)?;
    let wh = tape.param(params, LSTM_W_HIDDEN)?;
    let b = tape.param(params, LSTM_BIAS)?;
    let projected = tape.matmul(steps, wx)?;
    let projected = tape.add(projected, b)?;
    let zeros = tape.constant_matrix(1, h, vec![0.0; h])?;
    let (mut hidden, mut cell) = (zeros, zeros);
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = tape.slice_rows(projected, t, t + 1)?;
        let rec = tape.matmul(hidden, wh)?;
        let gates = tape.add(x_t, rec)?;
        let i_raw = tape.slice_cols(gates, 0, h)?;
        let f_raw = tape.slice_cols(gates, h, 2 * h)?;
        let g_raw = tape.slice_cols(gates, 2 * h, 3 * h)?;
        let o_raw = tape.slice_cols(gates, 3 * h, 4 * h)?;
        let i = tape.sigmoid(i_raw)?;
        let f = tape.sigmoid(f_raw)?;
        let g = tape.tanh(g_raw)?;
        let o = tape.sigmoid(o_raw)?;
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, g)?;
        cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell)?;
        hidden = tape.mul(o, squashed)?;
        outputs.push(hidden);
    }
    if outputs.is_empty() {
        return Err(Error::Domain {
            op: "recurrent",
            detail: "sequence has no steps".into(),
        });
    }
    tape.concat_rows(&outputs)
}

/// Two-layer head `h → h/2 → out_dim` at `head.0.*` and `head.1.*`.
pub fn init_head<R: Rng>(params: &mut ParameterSet, hidden: usize, out_dim: usize, rng: &mut R) -> Result<()> {
    let mid = (hidden / 2).max(1);
    params.insert_glorot("head.0.weight", hidden, mid, rng)?;
    params.insert_zeros("head.0.bias", 1, mid)?;
    params.insert_glorot("head.1.weight", mid, out_dim, rng)?;
    params.insert_zeros("head.1.bias", 1, out_dim)
}

/// Row-wise probabilities `sigmoid(head(h))`.
pub fn head_forward(tape: &mut Tape, params: &ParameterSet, hidden: Var) -> Result<Var> {
    let w0 = tape.param(params, "head.0.weight")?;
    let b0 = tape.param(params, "head.0.bias")?;
    let w1 = tape.param(params, "head.1.weight")?;
    let b1 = tape.param(params, "head.1.bias")?;
    let z = tape.matmul(hidden, w0)?;
    let z = tape.add(z, b0)?;
    let z = tape.relu(z)?;
    let z = tape.matmul(z, w1)?;
    let z = tape.add(z, b1)?;
    tape.sigmoid(z)
}

/// Task probabilities from the hidden states `T × h`: one value for
/// mortality (state at hour 48), one per step for decompensation, and
/// [`PHENOTYPE_COUNT`] values from the final state for phenotyping.
pub fn predict(tape: &mut Tape, task: TaskKind, params: &ParameterSet, hiddens: Var) -> Result<Var> {
    let t_len = tape.dims(hiddens).0;
    let used = task.steps_used(t_len)?;
    let states = match task {
        TaskKind::Mortality => tape.slice_rows(hiddens, used - 1, used)?,
        TaskKind::Decompensation => hiddens,
        TaskKind::Phenotyping => tape.slice_rows(hiddens, t_len - 1, t_len)?,
    };
    let probs = head_forward(tape, params, states)?;
    let out = tape.dims(probs).1;
    if out != task.out_dim() {
        return Err(Error::Contract(format!(
            "head emits {out} values, {task} needs {}",
            task.out_dim()
        )));
    }
    Ok(probs)
}
