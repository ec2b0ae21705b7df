//! Fit results, parametric-bootstrap standard errors, Wald intervals and the
//! pure-SAR precision diagnostic.

use std::sync::Arc;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cle::{fit_cle, one_step_batch as cle_one_step_batch, CleWorkspace, FitOptions};
use crate::cls::{fit_cls, one_step as cls_one_step, ClsNetwork, ClsWorkspace};
use crate::error::{PsarError, Result};
use crate::network::WeightMatrix;
use crate::qmle::fit_qmle;
use crate::rng::{derive_seed, rng_from_seed, tag};
use crate::sim::{mat_vec, perturb_covariates, solve_s, ObservedData, PrivacyConfig, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Qmle,
    Cle,
    Cls,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Qmle => "qmle",
            EstimatorKind::Cle => "cle",
            EstimatorKind::Cls => "cls",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = PsarError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qmle" => Ok(EstimatorKind::Qmle),
            "cle" => Ok(EstimatorKind::Cle),
            "cls" => Ok(EstimatorKind::Cls),
            other => Err(PsarError::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Safeguards that fired during a fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub damped_steps: usize,
    pub rho_clipped: usize,
    pub sigma2_floored: bool,
    pub max_iter_hit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub estimator: EstimatorKind,
    /// For CLS, sigma^2 is the moment estimate at the final gamma; CLS
    /// itself only targets gamma.
    pub point: Theta,
    /// Standard errors ordered `(rho, beta..., sigma2)`, once computed.
    pub se: Option<Vec<f64>>,
    pub ci: Option<Vec<[f64; 2]>>,
    pub trace: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub timing_secs: f64,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    pub fn new(
        estimator: EstimatorKind,
        point: Theta,
        trace: Vec<Vec<f64>>,
        iterations: usize,
        converged: bool,
        timing_secs: f64,
        diagnostics: Diagnostics,
    ) -> Self {
        Self {
            estimator,
            point,
            se: None,
            ci: None,
            trace,
            iterations,
            converged,
            timing_secs,
            diagnostics,
        }
    }

    /// `rho, beta1..betap, sigma2`
    pub fn param_names(&self) -> Vec<String> {
        param_names(self.point.p())
    }

    /// Attach standard errors and the matching Wald intervals.
    pub fn with_se(mut self, se: Vec<f64>, level: f64) -> Self {
        let pt = self.point.to_vec();
        self.ci = Some(pt.iter().zip(&se).map(|(&p, &s)| confidence_interval(p, s, level)).collect());
        self.se = Some(se);
        self
    }
}

/// Fit `kind` on `d` with the default starts: QMLE for CLE, `init` (or OLS
/// with rho = 0) for CLS. The reported time covers the whole call, start
/// value included.
pub fn fit_estimator(
    kind: EstimatorKind,
    d: &ObservedData,
    init: Option<&Theta>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let start = std::time::Instant::now();
    let mut fit = match kind {
        EstimatorKind::Qmle => {
            let q = fit_qmle(d)?;
            FitResult::new(kind, q.theta_hat, Vec::new(), q.iterations, q.converged, 0.0, Diagnostics::default())
        }
        EstimatorKind::Cle => match init {
            Some(th) => fit_cle(d, th, opts)?,
            None => fit_cle(d, &fit_qmle(d)?.theta_hat, opts)?,
        },
        EstimatorKind::Cls => match init {
            Some(th) => fit_cls(d, &th.gamma(), opts)?,
            None => fit_cls(d, &crate::cls::ols_init(d)?, opts)?,
        },
    };
    fit.timing_secs = start.elapsed().as_secs_f64();
    Ok(fit)
}

pub fn param_names(p: usize) -> Vec<String> {
    let mut v = vec!["rho".to_string()];
    v.extend((1..=p).map(|j| format!("beta{j}")));
    v.push("sigma2".into());
    v
}

/// `point -/+ z_{(1+level)/2} se`
pub fn confidence_interval(point: f64, se: f64, level: f64) -> [f64; 2] {
    let z = Normal::standard().inverse_cdf(0.5 + 0.5 * level);
    [point - z * se, point + z * se]
}

/// Leading term of the pure-SAR precision of rho:
/// `sigma^4 / (N (lambda^2 + sigma^2)^2) * (tr(W^2) + tr(W W'))`.
pub fn pure_sar_precision_approx(w: &WeightMatrix, sigma2: f64, lambda2: f64) -> f64 {
    let c = w.csr();
    let tr_w2 = c.trace_product(c);
    let tr_wwt: f64 = c.values().iter().map(|v| v * v).sum();
    let n = w.n() as f64;
    sigma2 * sigma2 / (n * (lambda2 + sigma2).powi(2)) * (tr_w2 + tr_wwt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapMode {
    /// Full refit on every bootstrap sample, started at the point estimate.
    Refit,
    /// One corrected Newton step from the point estimate. The O(N^3)
    /// workspace at the estimate is shared by all samples, which makes CLE
    /// bootstrap affordable.
    #[serde(rename = "onestep")]
    OneStep,
}

impl std::str::FromStr for BootstrapMode {
    type Err = PsarError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "refit" => Ok(BootstrapMode::Refit),
            "onestep" | "one-step" => Ok(BootstrapMode::OneStep),
            other => Err(PsarError::Config(format!("unknown bootstrap mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapOutput {
    pub se: Vec<f64>,
    pub converged: usize,
    pub total: usize,
}

/// Pseudo-true design for the bootstrap world. Protected columns of `X*`
/// are shrunk toward their mean so that their sample variance matches
/// `var(X2*) - lambda_x^2`, the moment estimate of `var(X2)`. Using `X*`
/// unchanged would make the bootstrap covariates noisier than the real
/// ones while adding the same privacy noise, which understates the
/// variability of the protected coefficients.
pub fn bootstrap_design(d: &ObservedData) -> Mat<f64> {
    let mut x = d.x_star.clone();
    let lx = d.privacy.lambda2_x;
    if lx == 0.0 {
        return x;
    }
    let n = x.nrows() as f64;
    for j in d.privacy.p1..d.p() {
        let col = x.col_as_slice_mut(j);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            continue;
        }
        // Keep at least 10% of the observed variance when lambda_x^2 is
        // close to (or above) var(X2*).
        let c = ((var - lx).max(0.1 * var) / var).sqrt();
        col.iter_mut().for_each(|v| *v = mean + c * (*v - mean));
    }
    x
}

/// One bootstrap data set: `x_true` plays the true design, responses are
/// simulated from `theta` with fresh model error, then fresh privacy noise is
/// added to the response and the protected columns.
pub fn bootstrap_sample(d: &ObservedData, x_true: &Mat<f64>, theta: &Theta, seed: u64) -> Result<ObservedData> {
    let law = d.privacy.noise_law;
    let mut rng = rng_from_seed(derive_seed(seed, &[tag::MODEL_ERROR]));
    let mut b = mat_vec(x_true, &theta.beta);
    for bi in b.iter_mut() {
        *bi += law.draw(&mut rng, theta.sigma2);
    }
    let y = solve_s(&d.w, theta.rho, &b)?;
    let mut rng = rng_from_seed(derive_seed(seed, &[tag::PRIVACY_NOISE]));
    let y_star: Vec<f64> = y.iter().map(|&v| v + law.draw(&mut rng, d.privacy.lambda2)).collect();
    let x_star = perturb_covariates(x_true, &d.privacy, &mut rng);
    ObservedData::new(y_star, x_star, Arc::clone(&d.w), d.privacy)
}

fn sample_sd(draws: &[Vec<f64>]) -> Vec<f64> {
    let k = draws[0].len();
    let m = draws.len() as f64;
    (0..k)
        .map(|j| {
            let mean = draws.iter().map(|v| v[j]).sum::<f64>() / m;
            let ss = draws.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>();
            (ss / (m - 1.0)).sqrt()
        })
        .collect()
}

/// Parametric-bootstrap standard errors of `fit` on `d`, one per entry of
/// `(rho, beta..., sigma2)`. Sample `b` uses the stream derived from
/// `(seed, b)`, and results are gathered in sample order, so the output does
/// not depend on the thread count.
pub fn bootstrap_se(
    d: &ObservedData,
    fit: &FitResult,
    b: usize,
    seed: u64,
    mode: BootstrapMode,
    opts: &FitOptions,
) -> Result<BootstrapOutput> {
    if b < 2 {
        return Err(PsarError::Config("bootstrap needs at least 2 samples".into()));
    }
    let mut theta = fit.point.clone();
    theta.sigma2 = theta.sigma2.max(opts.sigma2_min);

    // The QMLE one-step is a plain Newton step on the uncorrected
    // likelihood: the same machinery with the noise levels set to zero.
    let cle_ws = match (fit.estimator, mode) {
        (EstimatorKind::Cle, BootstrapMode::OneStep) => {
            Some(CleWorkspace::new(&d.w, theta.rho, theta.sigma2, d.privacy.lambda2)?)
        }
        (EstimatorKind::Qmle, BootstrapMode::OneStep) => Some(CleWorkspace::new(&d.w, theta.rho, theta.sigma2, 0.0)?),
        _ => None,
    };
    let naive = PrivacyConfig::none(d.p());
    let cls_ws = match (fit.estimator, mode) {
        (EstimatorKind::Cls, BootstrapMode::OneStep) => {
            let net = ClsNetwork::new(&d.w);
            let ws = ClsWorkspace::from_network(&net, theta.rho);
            Some((net, ws))
        }
        _ => None,
    };

    let x_true = bootstrap_design(d);
    let sample = |i: usize| bootstrap_sample(d, &x_true, &theta, derive_seed(seed, &[tag::BOOTSTRAP, i as u64])).ok();
    let finite = |t: Theta| {
        let v = t.to_vec();
        v.iter().all(|x| x.is_finite()).then_some(v)
    };
    let results: Vec<Option<Vec<f64>>> = if let Some(ws) = &cle_ws {
        // Batched so the products with Omega^{-1} are matrix-matrix.
        const CHUNK: usize = 50;
        let mut out = Vec::with_capacity(b);
        for lo in (0..b).step_by(CHUNK) {
            let samples: Vec<Option<ObservedData>> = (lo..(lo + CHUNK).min(b)).into_par_iter().map(sample).collect();
            let mut ok: Vec<ObservedData> = samples.iter().flatten().cloned().collect();
            if fit.estimator == EstimatorKind::Qmle {
                ok.iter_mut().for_each(|s| s.privacy = naive);
            }
            let mut fits = cle_one_step_batch(ws, &ok, &theta.beta, opts).into_iter();
            for s in &samples {
                out.push(s.as_ref().and_then(|_| fits.next().unwrap().ok()).and_then(finite));
            }
        }
        out
    } else {
        let one = |i: usize| -> Option<Vec<f64>> {
            let db = sample(i)?;
            let est = match (fit.estimator, mode) {
                (EstimatorKind::Qmle, _) => fit_qmle(&db).ok().filter(|f| f.converged)?.theta_hat,
                (EstimatorKind::Cle, _) => fit_cle(&db, &theta, opts).ok().filter(|f| f.converged)?.point,
                (EstimatorKind::Cls, BootstrapMode::Refit) => {
                    fit_cls(&db, &theta.gamma(), opts).ok().filter(|f| f.converged)?.point
                }
                (EstimatorKind::Cls, BootstrapMode::OneStep) => {
                    let (net, ws) = cls_ws.as_ref()?;
                    cls_one_step(net, ws, &db, &theta.beta, opts).ok()?
                }
            };
            finite(est)
        };
        (0..b).into_par_iter().map(one).collect()
    };
    let draws: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let converged = draws.len();
    if (converged as f64) < 0.9 * b as f64 || converged < 2 {
        return Err(PsarError::TooFewConverged { converged, total: b });
    }
    Ok(BootstrapOutput { se: sample_sd(&draws), converged, total: b })
}

/// Classical plug-in covariance of the noise-free SAR MLE (inverse observed
/// information of the classical likelihood), used as a reference in tests.
pub fn classical_sar_se(d: &ObservedData, theta: &Theta) -> Result<Vec<f64>> {
    let ws = CleWorkspace::new(&d.w, theta.rho, theta.sigma2, 0.0)?;
    let h = ws.derivatives(d, &theta.beta).hessian;
    let k = h.nrows();
    let mut se = Vec::with_capacity(k);
    for j in 0..k {
        let e: Vec<f64> = (0..k).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
        let col = crate::spmat::solve_small(&h, &e)?;
        se.push(col[j].max(0.0).sqrt());
    }
    Ok(se)
}
