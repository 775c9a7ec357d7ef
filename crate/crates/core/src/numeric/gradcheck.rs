//! Central finite-difference oracle for tape gradients.

use std::collections::BTreeMap;

use super::{ParameterSet, Tape, Var};
use crate::error::{Error, Result};

/// Analytic and numeric gradients for every parameter entry.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: BTreeMap<String, Vec<f64>>,
    pub numeric: BTreeMap<String, Vec<f64>>,
}

impl GradCheck {
    /// Max over entries of `|analytic − numeric| / max(1, |numeric|)`.
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .flat_map(|(path, a)| a.iter().zip(&self.numeric[path]))
            .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &mut F, params: &ParameterSet) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if tape.dims(loss) != (1, 1) {
        return Err(Error::Contract("gradient check needs a scalar loss".into()));
    }
    Ok(tape.scalar_value(loss))
}

/// Computes analytic gradients via the tape and central differences with
/// step `eps` for every entry of every parameter.
pub fn gradient_pair<F>(mut f: F, params: &ParameterSet, eps: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &ParameterSet) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut work = params.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    let base = tape.scalar_value(loss);
    tape.backward(loss, &mut work)?;
    let analytic: BTreeMap<String, Vec<f64>> = work
        .iter()
        .map(|(p, t)| {
            let g = t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
            (p.clone(), g)
        })
        .collect();
    work.zero_grads();

    let again = evaluate(&mut f, &work)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let paths: Vec<String> = work.paths().map(str::to_string).collect();
    let mut numeric = BTreeMap::new();
    for path in paths {
        let n = work.require(&path)?.len();
        let mut grads = Vec::with_capacity(n);
        for i in 0..n {
            let original = work.require(&path)?.values()[i];
            work.get_mut(&path).expect("path exists").values_mut()[i] = original + eps;
            let plus = evaluate(&mut f, &work)?;
            work.get_mut(&path).expect("path exists").values_mut()[i] = original - eps;
            let minus = evaluate(&mut f, &work)?;
            work.get_mut(&path).expect("path exists").values_mut()[i] = original;
            grads.push((plus - minus) / (2.0 * eps));
        }
        numeric.insert(path, grads);
    }
    Ok(GradCheck { analytic, numeric })
}

/// Max relative error between tape gradients and central differences.
pub fn grad_check<F>(f: F, params: &ParameterSet, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParameterSet) -> Result<Var>,
{
    Ok(gradient_pair(f, params, eps)?.max_relative_error())
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn linear_loss_is_exact() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap())
            .unwrap();
        let x = Tensor::matrix(3, 1, vec![1.5, 0.25, -4.0]).unwrap();
        let err = grad_check(
            |tape, params| {
                let w = tape.param(params, "w")?;
                let xv = tape.constant(&x);
                tape.matmul(w, xv)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn nondeterminism_detected() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let res = grad_check(
            |tape, params| {
                calls.set(calls.get() + 1.0);
                let w = tape.param(params, "w")?;
                let c = tape.constant(&Tensor::scalar(calls.get()));
                tape.mul(w, c)
            },
            &p,
            1e-5,
        );
        assert!(matches!(res, Err(Error::Oracle(_))));
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::row(vec![0.5, -0.3]).unwrap()).unwrap();
        let mut check = gradient_pair(
            |tape, params| {
                let w = tape.param(params, "w")?;
                let t = tape.tanh(w)?;
                let s = tape.mul(t, t)?;
                tape.sum_all(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(check.max_relative_error() < 1e-8);
        check.analytic.get_mut("w").unwrap()[1] += 0.1;
        assert!(check.max_relative_error() > 1e-2);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let p = ParameterSet::new();
        assert!(grad_check(|tape, _| Ok(tape.constant(&Tensor::scalar(0.0))), &p, 0.0).is_err());
    }
}
