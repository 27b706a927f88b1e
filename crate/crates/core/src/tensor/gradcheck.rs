use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use serde::Serialize;

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Denominator floor so coordinates whose true gradient is zero are judged
/// on absolute error instead of dividing noise by noise.
const REL_FLOOR: f64 = 1e-6;

/// At most one coordinate in this many may be excused as a kink.
const MAX_KINK_SHARE: usize = 100;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (parameter index, flat coordinate) of the worst relative error.
    pub worst: (usize, usize),
    pub coords_checked: usize,
    /// Coordinates skipped because a kink lies within `eps` of them.
    pub kinks: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Central finite-difference check of `f`'s analytic gradient.
///
/// `f` builds a scalar objective on a fresh tape from the leaf handles it is
/// given, so the same closure serves both the analytic pass and every
/// perturbed evaluation.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        coords_checked: 0,
        kinks: 0,
        tol,
        passed: false,
    };
    let base = eval(params)?;
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for coord in 0..grad.numel() {
            let orig = params[pi].data()[coord];
            probe[pi].data_mut()[coord] = orig + eps;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[coord] = orig - eps;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = grad.data()[coord];
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(REL_FLOOR);
            report.coords_checked += 1;
            if rel >= tol {
                // A derivative jump within `eps` (a ReLU kink) leaves the
                // analytic value on one side, off the central estimate by
                // half the one-sided slope gap. A wrong gradient of a smooth
                // objective has nearly equal one-sided slopes instead, and
                // stays wrong at a finer step, where a nearby kink drops out.
                let (fwd, bwd) = ((plus - base) / eps, (base - minus) / eps);
                let fine = eps / 10.0;
                probe[pi].data_mut()[coord] = orig + fine;
                let plus = eval(&probe)?;
                probe[pi].data_mut()[coord] = orig - fine;
                let minus = eval(&probe)?;
                probe[pi].data_mut()[coord] = orig;
                let fine_abs = ((plus - minus) / (2.0 * fine) - exact).abs();
                let fine_ok = fine_abs / exact.abs().max(REL_FLOOR) < tol;
                if (fwd - bwd).abs() >= abs || fine_ok {
                    report.kinks += 1;
                    continue;
                }
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, coord);
            }
        }
    }
    report.passed =
        report.max_rel_err < tol && report.kinks * MAX_KINK_SHARE <= report.coords_checked;
    Ok(report)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::usage(format!(
            "grad_check objective must be scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
