use std::collections::BTreeMap;

use super::ParameterSet;
use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Adaptive-moment (Adam) optimizer state with bias correction.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, path: &str) -> Option<&[f64]> {
        self.first.get(path).map(Vec::as_slice)
    }

    /// Applies one update to every parameter in `params` and zeroes the gradients.
    ///
    /// Fails without touching any parameter if a gradient is missing.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if let Some((path, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Contract(format!(
                "parameter `{path}` has no gradient; run backward first"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        for (path, tensor) in params.iter_mut() {
            let grad = tensor.grad().expect("checked above").to_vec();
            let m = self
                .first
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .second
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if m.len() != grad.len() {
                return Err(Error::shape(
                    "optimizer",
                    format!("moment size for `{path}` no longer matches its parameter"),
                ));
            }
            let values = tensor.values_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Tape, Tensor};

    fn scalar_params(w: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(w)).unwrap();
        p
    }

    #[test]
    fn step_counter_and_grad_reset() {
        let mut p = scalar_params(0.0);
        p.get_mut("w").unwrap().accumulate_grad(&[1.0]);
        let mut opt = OptimizerState::new(1e-4);
        assert_eq!(opt.step_count(), 0);
        opt.step(&mut p).unwrap();
        assert_eq!(opt.step_count(), 1);
        assert!(p.get("w").unwrap().grad().is_none());
        assert!(matches!(opt.step(&mut p), Err(Error::Contract(_))));
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        let lr = 1e-3;
        let mut p = scalar_params(0.0);
        let mut opt = OptimizerState::new(lr);
        let mut last = 0.0;
        let mut delta = 0.0;
        for _ in 0..2000 {
            p.get_mut("w").unwrap().accumulate_grad(&[0.37]);
            opt.step(&mut p).unwrap();
            let now = p.get("w").unwrap().values()[0];
            delta = last - now;
            last = now;
        }
        assert!((delta - lr).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn minimizes_shifted_square() {
        let mut p = scalar_params(0.0);
        let mut opt = OptimizerState::new(0.1);
        let mut tape = Tape::new();
        for _ in 0..100 {
            tape.reset();
            let w = tape.param(&p, "w").unwrap();
            let three = tape.constant(&Tensor::scalar(3.0));
            let diff = tape.sub(w, three).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            tape.backward(sq, &mut p).unwrap();
            opt.step(&mut p).unwrap();
        }
        let w = p.get("w").unwrap().values()[0];
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }
}
