//! Central finite-difference checks of tape gradients.
//!
//! The numeric side evaluates the forward function only; it never touches
//! the backward pass it is checking.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    /// Max over inputs of `‖analytic − numeric‖∞ / max(‖numeric‖∞, ‖analytic‖∞, 1e-8)`.
    pub max_rel_error: f64,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Relative error between two gradient vectors, normalized by the larger
/// infinity norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf_norm(numeric).max(inf_norm(analytic)).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`.
pub fn check<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Result<Tensor<'t>>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(d, s)| tape.variable(d.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    if out.len() != 1 {
        return Err(Error::NonScalarLoss(out.shape()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();

    let eval = |which: usize, k: usize, delta: f64| -> Result<f64> {
        let t = Tape::new();
        let vs = inputs
            .iter()
            .enumerate()
            .map(|(i, (d, s))| {
                let mut d = d.clone();
                if i == which {
                    d[k] += delta;
                }
                t.constant(d, s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&t, &vs)?.item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    for (i, (d, _)) in inputs.iter().enumerate() {
        let mut g = vec![0.0; d.len()];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = (eval(i, k, h)? - eval(i, k, -h)?) / (2.0 * h);
        }
        numeric.push(g);
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}
