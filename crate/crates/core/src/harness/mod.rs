//! Seeded Monte Carlo runner.
//!
//! Replicate `r` derives every stream from `(seed, r)`: a fresh network,
//! covariates, model error and privacy noise. Replicates run on the rayon
//! pool and are gathered in index order, and dense kernels are forced
//! single-threaded, so the raw table does not depend on the worker count.

pub mod bench;
pub mod config;
pub mod metrics;

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cle::{fit_cle, FitOptions};
use crate::error::{PsarError, Result};
use crate::extensions::{perturb_network, PerturbSpec};
use crate::inference::{bootstrap_se, fit_estimator, param_names, EstimatorKind, FitResult};
use crate::network::{prepare, row_normalize};
use crate::rng::{derive_seed, tag};
use crate::sim::{add_privacy_noise, format_f64, gen_covariates, simulate_sar, ObservedData};

pub use bench::{bench_timing, loglog_slope, timing_csv, TimingRow};
pub use config::{ExperimentConfig, Generator};
pub use metrics::{compute_rmse, summarize, ParamMetrics};

/// Pin dense kernels to one thread. Parallelism comes from replicates;
/// nested parallel BLAS would only add contention and make reductions
/// order-dependent.
pub fn single_threaded_kernels() {
    faer::set_global_parallelism(faer::Par::Seq);
}

/// Observed data for replicate `r`.
pub fn replicate_data(cfg: &ExperimentConfig, r: usize) -> Result<ObservedData> {
    let rs = derive_seed(cfg.seed, &[r as u64]);
    let a = cfg.generator.generate(cfg.n, derive_seed(rs, &[tag::NETWORK]))?;
    let prep = prepare(&a)?;
    let w = Arc::new(prep.weights);
    let x = gen_covariates(w.n(), cfg.theta0.p(), derive_seed(rs, &[tag::COVARIATES]));
    let t = simulate_sar(w, &cfg.theta0, x, derive_seed(rs, &[tag::MODEL_ERROR]), cfg.privacy.noise_law)?;
    let mut d = add_privacy_noise(&t, &cfg.privacy, derive_seed(rs, &[tag::PRIVACY_NOISE]))?;
    if let Some(s) = cfg.perturb_s {
        let spec = PerturbSpec::new(s, derive_seed(rs, &[tag::PERTURB]));
        let (a_star, _) = perturb_network(&prep.adjacency, &spec)?;
        d.w = Arc::new(row_normalize(&a_star)?);
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NotConverged,
    Failed(String),
}

impl Status {
    fn label(&self) -> String {
        match self {
            Status::Ok => "ok".into(),
            Status::NotConverged => "not_converged".into(),
            Status::Failed(msg) => format!("failed: {msg}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimator: EstimatorKind,
    pub status: Status,
    pub iterations: usize,
    pub estimate: Option<Vec<f64>>,
    pub se: Option<Vec<f64>>,
    /// Excluded from the raw table, which must be byte-reproducible.
    pub time_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_time_secs: f64,
    pub params: Vec<ParamMetrics>,
}

impl EstimatorSummary {
    pub fn param(&self, name: &str) -> Option<&ParamMetrics> {
        self.params.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub config: ExperimentConfig,
    pub summaries: Vec<EstimatorSummary>,
    pub records: Vec<ReplicateRecord>,
}

impl McReport {
    pub fn summary(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.estimator == kind)
    }

    /// One row per (replicate, estimator): estimates then standard errors.
    /// Timings are left out so identical runs give identical bytes.
    pub fn raw_csv(&self) -> String {
        let names = param_names(self.config.theta0.p());
        let mut out = String::from("replicate,estimator,status,iterations");
        for n in &names {
            let _ = write!(out, ",{n}");
        }
        for n in &names {
            let _ = write!(out, ",se_{n}");
        }
        out.push('\n');
        let cell = |v: Option<&Vec<f64>>, j: usize| v.map(|v| format_f64(v[j])).unwrap_or_default();
        for r in &self.records {
            let _ = write!(out, "{},{},{},{}", r.replicate, r.estimator.name(), csv_quote(&r.status.label()), r.iterations);
            for j in 0..names.len() {
                let _ = write!(out, ",{}", cell(r.estimate.as_ref(), j));
            }
            for j in 0..names.len() {
                let _ = write!(out, ",{}", cell(r.se.as_ref(), j));
            }
            out.push('\n');
        }
        out
    }

    /// `estimator,param,truth,mean,bias,se,sehat,cp,n_ok,n_failed,mean_time_secs`
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("estimator,param,truth,mean,bias,se,sehat,cp,n_ok,n_failed,mean_time_secs\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for s in &self.summaries {
            for p in &s.params {
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.4}",
                    s.estimator.name(),
                    p.name,
                    p.truth,
                    p.mean,
                    p.bias,
                    p.se,
                    opt(p.sehat),
                    opt(p.cp),
                    s.n_ok,
                    s.n_failed,
                    s.mean_time_secs
                );
            }
        }
        out
    }

    /// Write the raw table and JSON report to the configured paths.
    pub fn write_outputs(&self) -> Result<()> {
        if let Some(p) = &self.config.raw_output {
            std::fs::write(p, self.raw_csv())?;
        }
        if let Some(p) = &self.config.report_output {
            std::fs::write(p, serde_json::to_string_pretty(self)?)?;
        }
        Ok(())
    }
}

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn record(r: usize, kind: EstimatorKind, res: Result<FitResult>) -> ReplicateRecord {
    match res {
        Ok(f) => ReplicateRecord {
            replicate: r,
            estimator: kind,
            status: if f.converged { Status::Ok } else { Status::NotConverged },
            iterations: f.iterations,
            estimate: Some(f.point.to_vec()),
            se: f.se,
            time_secs: f.timing_secs,
        },
        Err(e) => failed(r, kind, e.to_string()),
    }
}

fn failed(r: usize, kind: EstimatorKind, msg: String) -> ReplicateRecord {
    ReplicateRecord {
        replicate: r,
        estimator: kind,
        status: Status::Failed(msg),
        iterations: 0,
        estimate: None,
        se: None,
        time_secs: 0.0,
    }
}

fn run_replicate(cfg: &ExperimentConfig, r: usize, opts: &FitOptions) -> Vec<ReplicateRecord> {
    let d = match replicate_data(cfg, r) {
        Ok(d) => d,
        Err(e) => {
            return cfg.estimators.iter().map(|&k| failed(r, k, e.to_string())).collect();
        }
    };
    let rs = derive_seed(cfg.seed, &[r as u64]);
    let mut qmle: Option<FitResult> = None;
    let mut out = Vec::new();
    for &kind in &cfg.estimators {
        let fit = match (kind, &qmle) {
            // Reuse this replicate's QMLE as the CLE start, charging its time.
            (EstimatorKind::Cle, Some(q)) if q.converged => fit_cle(&d, &q.point, opts).map(|mut f| {
                f.timing_secs += q.timing_secs;
                f
            }),
            _ => fit_estimator(kind, &d, None, opts),
        };
        if kind == EstimatorKind::Qmle {
            qmle = fit.as_ref().ok().cloned();
        }
        let fit = fit.and_then(|f| {
            if cfg.bootstrap_b == 0 || !f.converged {
                return Ok(f);
            }
            let seed = derive_seed(rs, &[tag::BOOTSTRAP, kind as u64]);
            let bs = bootstrap_se(&d, &f, cfg.bootstrap_b, seed, cfg.bootstrap_mode, opts)?;
            Ok(f.with_se(bs.se, cfg.level))
        });
        out.push(record(r, kind, fit));
    }
    out
}

/// Run the experiment on the current rayon pool.
pub fn run_mc(cfg: &ExperimentConfig) -> Result<McReport> {
    cfg.validate()?;
    single_threaded_kernels();
    let opts = FitOptions::default();
    let records: Vec<ReplicateRecord> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r, &opts))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let truth = cfg.theta0.to_vec();
    let mut summaries = Vec::new();
    for &kind in &cfg.estimators {
        let mine: Vec<&ReplicateRecord> = records.iter().filter(|r| r.estimator == kind).collect();
        let ok: Vec<&&ReplicateRecord> = mine.iter().filter(|r| r.status == Status::Ok).collect();
        let n_failed = mine.len() - ok.len();
        if n_failed * 10 > cfg.replicates {
            return Err(PsarError::TooManyFailures { failed: n_failed, total: cfg.replicates });
        }
        let est: Vec<Vec<f64>> = ok.iter().map(|r| r.estimate.clone().unwrap()).collect();
        let ses: Vec<Option<Vec<f64>>> = ok.iter().map(|r| r.se.clone()).collect();
        let params = summarize(&param_names(cfg.theta0.p()), &truth, &est, &ses, cfg.level);
        let mean_time_secs = ok.iter().map(|r| r.time_secs).sum::<f64>() / ok.len().max(1) as f64;
        summaries.push(EstimatorSummary { estimator: kind, n_ok: ok.len(), n_failed, mean_time_secs, params });
    }
    Ok(McReport { config: cfg.clone(), summaries, records })
}

/// [`run_mc`] on a dedicated pool with `workers` threads.
pub fn run_mc_with_workers(cfg: &ExperimentConfig, workers: usize) -> Result<McReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PsarError::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_mc(cfg))
}
