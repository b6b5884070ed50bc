use super::{GradBundle, MlpNet};
use crate::Result;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat parameter index of the worst entry.
    pub worst_param: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub num_params: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Step for the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Magnitudes below `REL_FLOOR * max(1, |loss|)` count as absolute error.
/// Rounding in the difference quotient is about `2e-16 * |loss| / h`, so the
/// floor grows with the loss.
const REL_FLOOR: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the gradient `loss_fn` reports against central finite differences
/// (`h = 1e-5`) of the loss it reports, on every parameter.
pub fn gradient_check<F>(net: &MlpNet, loss_fn: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&MlpNet) -> Result<GradBundle>,
{
    let base = loss_fn(net)?;
    let floor = REL_FLOOR * base.loss.abs().max(1.0);
    let analytic: Vec<f64> = base.values().copied().collect();
    let mut probe = net.clone();
    let mut worst = (0.0_f64, 0usize, 0.0_f64, 0.0_f64);
    for i in 0..analytic.len() {
        let orig = *probe.param_mut(i).unwrap();
        *probe.param_mut(i).unwrap() = orig + FD_STEP;
        let plus = loss_fn(&probe)?.loss;
        *probe.param_mut(i).unwrap() = orig - FD_STEP;
        let minus = loss_fn(&probe)?.loss;
        *probe.param_mut(i).unwrap() = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = rel_error(analytic[i], numeric, floor);
        if err > worst.0 || err.is_nan() {
            worst = (err, i, analytic[i], numeric);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_param: worst.1,
        worst_analytic: worst.2,
        worst_numeric: worst.3,
        num_params: analytic.len(),
        tolerance,
        passed: worst.0 < tolerance,
    })
}
