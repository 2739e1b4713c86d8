use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub per_coordinate: Vec<f64>,
}

/// Compares `analytic` against central finite differences of `loss_fn`
/// around `params`, coordinate by coordinate.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check<F>(
    loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("step must be positive, got {eps}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::dim("gradient_check", params.len(), analytic.len()));
    }
    let mut theta = params.to_vec();
    let mut per_coordinate = Vec::with_capacity(params.len());
    let mut worst_index = 0;
    let mut max_rel = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = loss_fn(&theta);
        theta[i] = orig - eps;
        let minus = loss_fn(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "loss not finite when perturbing coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst_index = i;
        }
        per_coordinate.push(rel);
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        checked: params.len(),
        worst_index,
        per_coordinate,
    })
}
