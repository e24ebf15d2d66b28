//! Central finite-difference gradient checking in float64.

use crate::error::Result;
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Worst relative error over all inputs.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

/// `||a - n|| / max(||a||, ||n||)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Compare tape gradients of `f` against central differences.
///
/// Non-scalar outputs are reduced to a scalar with a fixed random weighting
/// drawn from `rng`, so every output element contributes. `f` must be a pure
/// function of its inputs (recreate any RNG it uses on every call).
pub fn check<F>(inputs: &[Tensor<f64>], f: F, rng: &mut RngState) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_with_step(inputs, f, rng, DEFAULT_STEP)
}

pub fn check_with_step<F>(
    inputs: &[Tensor<f64>],
    f: F,
    rng: &mut RngState,
    step: f64,
) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = f(&tape, &vars)?.shape();
        shape
    };
    let weights = Tensor::uniform(&out_shape, -1.0, 1.0, rng);

    let objective = |vals: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let w = tape.constant(weights.clone());
        Ok(out.mul(w)?.sum()?.item())
    };

    let tape = Tape::new();
    let analytic = {
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let w = tape.constant(weights.clone());
        let loss = out.mul(w)?.sum()?;
        tape.grad(loss, &vars)?
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut vals: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; vals[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + step;
            let plus = objective(&vals)?;
            vals[k].data_mut()[i] = orig - step;
            let minus = objective(&vals)?;
            vals[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        per_input.push(relative_error(a.data(), &numeric));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        per_input,
    })
}
