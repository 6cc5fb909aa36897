use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Relative error used throughout: `|a - b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Checks the gradient of a scalar computation with respect to `params`.
///
/// `f` receives a fresh tape with one trainable leaf per entry of `params`
/// and must return a `1 x 1` output.
pub fn grad_check<'a, F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ps
            .iter()
            .map(|p| tape.param_owned(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        Ok(v)
    };

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars = params
            .iter()
            .map(|p| tape.param_owned(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).item().is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        let mut grads = tape.backward(out)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[j];
            let e = rel_err(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err || report.coords_checked == 1 {
                report.max_rel_err = e;
                report.worst = (pi, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
