//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it verifies.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per checked input: `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub relative_errors: Vec<Scalar>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> Scalar {
        self.relative_errors.iter().copied().fold(0.0, Scalar::max)
    }
}

/// Infinity-norm relative error between two gradient buffers.
pub fn relative_error(analytic: &[Scalar], numeric: &[Scalar]) -> Scalar {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, Scalar::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, Scalar::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with step `h` for every input flagged in `wrt`.
pub fn check_gradients<F>(inputs: &[Tensor], wrt: &[bool], h: Scalar, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    assert_eq!(inputs.len(), wrt.len());
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &w)| tape.leaf(t.clone(), w))
        .collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<Scalar> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.item()
    };

    let mut relative_errors = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        if !wrt[i] {
            continue;
        }
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut numeric = vec![0.0; input.numel()];
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        relative_errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(GradCheckReport { relative_errors })
}
