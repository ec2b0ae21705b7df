//! Monte Carlo summaries and the prediction RMSE.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::Result;
use crate::inference::FitResult;
use crate::sim::{mat_vec, solve_s, ObservedData};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMetrics {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    /// `|mean - truth|`
    pub bias: f64,
    /// Monte Carlo SD with divisor R.
    pub se: f64,
    /// Mean estimated standard error, when replicates carry one.
    pub sehat: Option<f64>,
    /// Percentage of intervals `est -/+ z se` that contain the truth.
    pub cp: Option<f64>,
}

/// Per-parameter metrics over the successful replicates. `ses[r]` is the
/// estimated standard-error vector of replicate `r`, if any; SE-hat and CP
/// use only the replicates that have one.
pub fn summarize(
    names: &[String],
    truth: &[f64],
    estimates: &[Vec<f64>],
    ses: &[Option<Vec<f64>>],
    level: f64,
) -> Vec<ParamMetrics> {
    let r = estimates.len() as f64;
    let z = Normal::standard().inverse_cdf(0.5 + 0.5 * level);
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / r;
            let var = estimates.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / r;
            let with_se: Vec<(f64, f64)> =
                estimates.iter().zip(ses).filter_map(|(e, s)| s.as_ref().map(|s| (e[j], s[j]))).collect();
            let (sehat, cp) = if with_se.is_empty() {
                (None, None)
            } else {
                let m = with_se.len() as f64;
                let sehat = with_se.iter().map(|(_, s)| s).sum::<f64>() / m;
                let hits = with_se.iter().filter(|(e, s)| (e - truth[j]).abs() <= z * s).count();
                (Some(sehat), Some(100.0 * hits as f64 / m))
            };
            ParamMetrics { name: name.clone(), truth: truth[j], mean, bias: (mean - truth[j]).abs(), se: var.sqrt(), sehat, cp }
        })
        .collect()
}

/// `sqrt(mean((Yhat - Y*)^2))` with `Yhat = (I - rho W)^{-1} X* beta`. The
/// comparison target is the released response, the only one a data user has.
pub fn compute_rmse(fit: &FitResult, d: &ObservedData) -> Result<f64> {
    let xb = mat_vec(&d.x_star, &fit.point.beta);
    let yhat = solve_s(&d.w, fit.point.rho, &xb)?;
    let ss: f64 = yhat.iter().zip(&d.y_star).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / d.n() as f64).sqrt())
}
