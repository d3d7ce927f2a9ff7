//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used to build the numeric gradient, so the
//! check is independent of every backward rule it validates.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, abs_floor / rel_tol)` seen.
    pub max_error: f64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.rel_tol
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar output, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of a scalar function against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = eval(&f, inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let floor = cfg.abs_floor / cfg.rel_tol;
    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: None,
        checked: 0,
        rel_tol: cfg.rel_tol,
    };
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + cfg.step;
            let (t, _, o) = eval(&f, &probe)?;
            let plus = t.data(o)[0];
            probe[i].data_mut()[e] = orig - cfg.step;
            let (t, _, o) = eval(&f, &probe)?;
            let minus = t.data(o)[0];
            probe[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_error {
                report.max_error = err;
                report.worst = Some(Mismatch {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
