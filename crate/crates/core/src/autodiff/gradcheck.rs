//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so that gradients which are
/// (numerically) zero are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Relative discrepancy between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat position of the worst element.
    pub worst_element: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
    /// Set when the function itself failed to evaluate.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares tape gradients of the scalar `f(params)` against central
/// differences `(f(p+h) - f(p-h)) / 2h` element by element.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport {
        tolerance,
        step,
        params: Vec::new(),
        failure: None,
    };

    let analytic = (|| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    })();
    let analytic = match analytic {
        Ok(a) => a,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_element: 0,
        };
        for e in 0..grad.len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let plus = evaluate(&f, &work);
            work[pi].data_mut()[e] = orig - step;
            let minus = evaluate(&f, &work);
            work[pi].data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(err), _) | (_, Err(err)) => {
                    report.failure = Some(err.to_string());
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[e];
            let rel = relative_error(a, numeric);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_element = e;
            }
        }
        report.params.push(check);
    }
    report
}
