//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest relative error among entries whose absolute error exceeds `abs_tol`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

/// Compares reverse-mode gradients of `loss(tape, params)` with central differences,
/// perturbing every entry of every parameter.
pub fn check_gradients<F>(params: &[Tensor], loss: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = loss(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + cfg.step;
            let up = eval(&work)?;
            work[pi].data_mut()[idx] = orig - cfg.step;
            let down = eval(&work)?;
            work[pi].data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad.data()[idx];
            let abs = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs <= cfg.abs_tol {
                continue;
            }
            let rel = abs / a.abs().max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > cfg.rel_tol {
                report.mismatches.push(Mismatch {
                    param: pi,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
