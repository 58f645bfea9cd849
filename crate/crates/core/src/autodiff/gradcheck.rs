//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Element-wise comparison of analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a|, |n|)` over elements where either side
    /// exceeds `tiny`.
    pub max_rel_err: f64,
    /// Largest `|a - n|` over the remaining (near-zero) elements.
    pub max_abs_err_tiny: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol && self.max_abs_err_tiny < rel_tol * 1e-3
    }
}

pub const TINY: f64 = 1e-7;
/// Relative disagreement between step h and h/2 treated as a kink.
pub const KINK_TOL: f64 = 1e-5;
pub const KINK_RETRIES: usize = 2;
/// Roundoff budget of one loss evaluation, in units of its ulp.
pub const ROUNDOFF_ULPS: f64 = 256.0;

/// Checks the gradient of the scalar built by `f` with respect to each of
/// `inputs`. `coords` restricts which flat elements of each input are
/// perturbed (`None` checks all of them).
pub fn check<F>(inputs: &[Tensor], coords: Option<&[Vec<usize>]>, eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    compare(inputs, &analytic, coords, eps, |xs| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    })
}

/// Compares precomputed `analytic` gradients against central differences of
/// the scalar function `value`.
///
/// Piecewise-linear ops (relu, max pooling) have kinks. A central difference
/// over a kink depends on the step, so each element is also estimated with
/// half the step; when the two disagree by more than `KINK_TOL` (relative,
/// plus a roundoff allowance) the step straddles a kink and is divided by
/// ten, at most `KINK_RETRIES` times.
/// The estimate from the most self-consistent step is used, so roundoff on
/// tiny gradients cannot push the step further down.
pub fn compare<F>(
    inputs: &[Tensor],
    analytic: &[Tensor],
    coords: Option<&[Vec<usize>]>,
    eps: f64,
    value: F,
) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err_tiny: 0.0,
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for k in 0..inputs.len() {
        let all: Vec<usize>;
        let idx: &[usize] = match coords {
            Some(c) => &c[k],
            None => {
                all = (0..inputs[k].len()).collect();
                &all
            }
        };
        for &i in idx {
            let orig = xs[k].data()[i];
            let mut h = eps;
            let mut best = (f64::INFINITY, 0.0);
            for _ in 0..=KINK_RETRIES {
                let mut central = |h: f64| -> Result<(f64, f64)> {
                    xs[k].data_mut()[i] = orig + h;
                    let up = value(&xs)?;
                    xs[k].data_mut()[i] = orig - h;
                    let down = value(&xs)?;
                    xs[k].data_mut()[i] = orig;
                    Ok(((up - down) / (2.0 * h), up.abs().max(down.abs())))
                };
                let (full, mag) = central(h)?;
                let (half, _) = central(h / 2.0)?;
                // Allowed disagreement: relative tolerance plus the roundoff
                // of a difference quotient at step h/2.
                let allowed = KINK_TOL * full.abs().max(half.abs()) + ROUNDOFF_ULPS * f64::EPSILON * mag / h;
                let gap = (full - half).abs() / allowed.max(f64::MIN_POSITIVE);
                if gap < best.0 {
                    best = (gap, full);
                }
                if gap <= 1.0 {
                    break;
                }
                h /= 10.0;
            }
            let num = best.1;
            let a = analytic[k].data()[i];
            let scale = a.abs().max(num.abs());
            if scale > TINY {
                report.max_rel_err = report.max_rel_err.max((a - num).abs() / scale);
            } else {
                report.max_abs_err_tiny = report.max_abs_err_tiny.max((a - num).abs());
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
