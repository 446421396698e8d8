use super::{DiffTensor, Tape};
use crate::error::{Error, Result};

/// max over components of |analytic − numeric| / max(1, |analytic|).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of a flat vector.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares the tape gradient of `f` at `x` with central differences of step `h`.
///
/// `f` builds its computation on the tape it is handed; it must be
/// deterministic for the result to mean anything.
pub fn finite_diff_check<F>(f: F, shape: &[usize], x: &[f64], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, DiffTensor<'t>) -> Result<DiffTensor<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let tape = Tape::new();
    let input = tape.param(shape, x.to_vec())?;
    let out = f(&tape, input)?;
    out.backward()?;
    let analytic = input.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |v: &[f64]| -> f64 {
        let tape = Tape::new();
        let input = tape.constant(shape, v.to_vec()).expect("shape checked above");
        f(&tape, input).map(|o| o.item()).unwrap_or(f64::NAN)
    };
    let numeric = finite_diff_grad(eval, x, h);
    Ok(max_rel_error(&analytic, &numeric))
}
