//! Wall-clock comparison of the corrected estimators over a grid of N.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cle::FitOptions;
use crate::error::Result;
use crate::inference::{fit_estimator, EstimatorKind};

use super::{replicate_data, single_threaded_kernels, ExperimentConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub n: usize,
    pub estimator: EstimatorKind,
    pub reps: usize,
    pub mean_secs: f64,
}

/// Mean wall-clock per fit (start value included, data generation
/// excluded) for each N in `ns`, using `base` for everything but N.
pub fn bench_timing(base: &ExperimentConfig, ns: &[usize], reps: usize) -> Result<Vec<TimingRow>> {
    single_threaded_kernels();
    let opts = FitOptions::default();
    let mut rows = Vec::new();
    for &n in ns {
        let cfg = ExperimentConfig { n, ..base.clone() };
        let data: Vec<_> = (0..reps).map(|r| replicate_data(&cfg, r)).collect::<Result<_>>()?;
        for &kind in &base.estimators {
            let mut total = 0.0;
            for d in &data {
                total += fit_estimator(kind, d, None, &opts)?.timing_secs;
            }
            rows.push(TimingRow { n, estimator: kind, reps, mean_secs: total / reps as f64 });
        }
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("n,estimator,reps,mean_secs\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.6}", r.n, r.estimator.name(), r.reps, r.mean_secs);
    }
    out
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
