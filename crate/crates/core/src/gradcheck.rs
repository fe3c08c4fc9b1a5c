//! Central finite-difference verification of tape gradients.

use ndarray::Array2;

use crate::autograd::{AutogradError, Tape, Var};

/// Relative errors are `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, coordinate by coordinate.
///
/// `f` receives a fresh tape and one parameter leaf per input and must
/// return a `1×1` value. Errors from `f` itself are propagated; gradient
/// disagreement is reported, not raised.
pub fn grad_check<'a, F, E>(f: F, inputs: &[Array2<f64>], h: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&Tape<'a, f64>, &[Var]) -> Result<Var, E>,
    E: From<AutogradError>,
{
    let eval = |values: &[Array2<f64>]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| tape.param(v.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let analytic: Vec<Array2<f64>> = {
        let tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|v| tape.param(v.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, x)| grads.get_or_zeros(v, x.dim()))
            .collect()
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut report = InputReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for j in 0..input.len() {
            let cols = input.ncols();
            let orig = input[[j / cols, j % cols]];
            set_flat(&mut work[i], j, orig + h);
            let plus = eval(&work)?;
            set_flat(&mut work[i], j, orig - h);
            let minus = eval(&work)?;
            set_flat(&mut work[i], j, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][[j / cols, j % cols]];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = j;
            }
            report.max_abs_error = report.max_abs_error.max(abs);
        }
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.max_rel_error <= tol);
    Ok(GradCheckReport {
        inputs: reports,
        tol,
        passed,
    })
}

fn set_flat(a: &mut Array2<f64>, j: usize, v: f64) {
    let cols = a.ncols();
    a[[j / cols, j % cols]] = v;
}
