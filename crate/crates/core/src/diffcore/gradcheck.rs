use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used when callers have no better choice.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFiniteValue { index: None });
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(v, x)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();
    drop(tape);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = xs.to_vec();
    let mut flat = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[t].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteValue { index: Some(flat) });
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            flat += 1;
        }
    }
    Ok(worst)
}
