//! Corrected least squares.
//!
//! For a Gaussian SAR the full conditional of `Y_i` given the rest has mean
//! `mu_i + sum_j alpha_ij (Y_j - mu_j)` with `alpha_ij = -(S'S)_ij d_i` and
//! `d_i = 1 / (S'S)_ii`. Summing squared conditional residuals gives
//!
//! ```text
//! L_LS(gamma) = | D S' (S Y - X beta) |^2,   D = diag(d).
//! ```
//!
//! On noisy data `E L_LS*` exceeds `E L_LS` by
//! `g(gamma) = lambda^2 tr(G^2 D^2) + lambda_x^2 |beta_2|^2 tr(G D^2)`,
//! `G = S'S`, and the score/Hessian corrections are derivatives of `g`.
//! Everything here is O(nnz): no N x N matrix is ever formed.

use std::time::Instant;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::cle::{safeguarded_step, sigma2_moment, FitOptions};
use crate::error::Result;
use crate::inference::{Diagnostics, EstimatorKind, FitResult};
use crate::network::WeightMatrix;
use crate::qmle::ols;
use crate::sim::{dot, ObservedData, PrivacyConfig, Theta};
use crate::spmat::{
    d_rho_from_col_sq, solve_small, sparse_trace_products, CsrMatrix, DRho, SparseTraceCtx,
    TraceSpec,
};

/// Conditional-expectation weight of `Y_j` in `E(Y_i | Y_{-i})`:
/// `{rho (w_ij + w_ji) - rho^2 sum_k w_ki w_kj} / (1 + rho^2 sum_k w_ki^2)`.
pub fn alpha_weights(w: &WeightMatrix, rho: f64, i: usize, j: usize) -> f64 {
    let c = w.csr();
    let mut cross = 0.0;
    let mut ci = 0.0;
    for k in 0..c.nrows() {
        let wki = c.get(k, i);
        if wki != 0.0 {
            ci += wki * wki;
            cross += wki * c.get(k, j);
        }
    }
    (rho * (c.get(i, j) + c.get(j, i)) - rho * rho * cross) / (1.0 + rho * rho * ci)
}

/// Network pieces that do not depend on rho.
#[derive(Debug, Clone)]
pub struct ClsNetwork {
    w: CsrMatrix,
    wt: CsrMatrix,
    wtw: CsrMatrix,
    col_sq: Vec<f64>,
}

impl ClsNetwork {
    pub fn new(w: &WeightMatrix) -> Self {
        let w = w.csr().clone();
        let wt = w.transpose();
        let wtw = wt.matmul(&w);
        let col_sq = w.col_sq_sums();
        Self { w, wt, wtw, col_sq }
    }
}

/// rho-dependent state: the `d_rho` family and the sparse trace context.
#[derive(Debug, Clone)]
pub struct ClsWorkspace {
    pub rho: f64,
    pub d: DRho,
    pub ctx: SparseTraceCtx,
}

impl ClsWorkspace {
    pub fn new(w: &WeightMatrix, rho: f64) -> Self {
        Self::from_network(&ClsNetwork::new(w), rho)
    }

    pub fn from_network(net: &ClsNetwork, rho: f64) -> Self {
        let d = d_rho_from_col_sq(net.col_sq.clone(), rho);
        let ctx = SparseTraceCtx::from_parts(net.w.clone(), net.wt.clone(), net.wtw.clone(), rho);
        Self { rho, d, ctx }
    }

    fn trace(&self, spec: TraceSpec) -> f64 {
        sparse_trace_products(&self.ctx, &self.d, spec)
    }

    /// `S' v`
    fn st(&self, v: &[f64]) -> Vec<f64> {
        let wtv = self.ctx.wt.matvec(v);
        v.iter().zip(&wtv).map(|(a, b)| a - self.rho * b).collect()
    }

    fn residual(&self, d: &ObservedData, beta: &[f64]) -> Vec<f64> {
        let wy = self.ctx.w.matvec(&d.y_star);
        let xb = d.x_beta(beta);
        (0..wy.len()).map(|i| d.y_star[i] - self.rho * wy[i] - xb[i]).collect()
    }

    /// `r = D S' V`
    pub fn objective(&self, d: &ObservedData, beta: &[f64]) -> f64 {
        let stv = self.st(&self.residual(d, beta));
        stv.iter().zip(&self.d.diag).map(|(s, di)| (s * di).powi(2)).sum()
    }

    /// `r` and its first and second derivatives in gamma.
    fn r_family(&self, d: &ObservedData, beta: &[f64], second: bool) -> RFamily {
        let n = d.n();
        let p = d.p();
        let (dg, d1, d2) = (&self.d.diag, &self.d.ddiag, &self.d.dddiag);
        let v = self.residual(d, beta);
        let stv = self.st(&v);
        let wtv = self.ctx.wt.matvec(&v);
        let wy = self.ctx.w.matvec(&d.y_star);
        let stwy = self.st(&wy);
        let r: Vec<f64> = (0..n).map(|i| dg[i] * stv[i]).collect();
        let r_rho: Vec<f64> =
            (0..n).map(|i| d1[i] * stv[i] - dg[i] * wtv[i] - dg[i] * stwy[i]).collect();
        let mut r_beta = Vec::with_capacity(p);
        let mut r_rho_beta = Vec::with_capacity(p);
        for j in 0..p {
            let xj = d.x_star.col_as_slice(j);
            let stx = self.st(xj);
            r_beta.push((0..n).map(|i| -dg[i] * stx[i]).collect::<Vec<_>>());
            if second {
                let wtx = self.ctx.wt.matvec(xj);
                r_rho_beta.push((0..n).map(|i| -d1[i] * stx[i] + dg[i] * wtx[i]).collect::<Vec<_>>());
            }
        }
        let r_rho_rho = if second {
            let wtwy = self.ctx.wt.matvec(&wy);
            (0..n)
                .map(|i| {
                    d2[i] * stv[i] - 2.0 * d1[i] * wtv[i] - 2.0 * d1[i] * stwy[i]
                        + 2.0 * dg[i] * wtwy[i]
                })
                .collect()
        } else {
            Vec::new()
        };
        RFamily { r, r_rho, r_beta, r_rho_rho, r_rho_beta }
    }

    pub fn score(&self, d: &ObservedData, beta: &[f64]) -> Vec<f64> {
        let f = self.r_family(d, beta, false);
        let mut g = vec![2.0 * dot(&f.r_rho, &f.r)];
        g.extend(f.r_beta.iter().map(|rb| 2.0 * dot(rb, &f.r)));
        g
    }

    pub fn derivatives(&self, d: &ObservedData, beta: &[f64]) -> (Vec<f64>, Mat<f64>) {
        let f = self.r_family(d, beta, true);
        let p = d.p();
        let mut cols: Vec<&[f64]> = vec![&f.r_rho];
        cols.extend(f.r_beta.iter().map(Vec::as_slice));
        let g: Vec<f64> = cols.iter().map(|c| 2.0 * dot(c, &f.r)).collect();
        let mut h = Mat::from_fn(p + 1, p + 1, |a, b| 2.0 * dot(cols[a], cols[b]));
        h[(0, 0)] += 2.0 * dot(&f.r_rho_rho, &f.r);
        for j in 0..p {
            let extra = 2.0 * dot(&f.r_rho_beta[j], &f.r);
            h[(0, j + 1)] += extra;
            h[(j + 1, 0)] += extra;
        }
        (g, h)
    }

    /// `g(gamma)` together with its gradient and Hessian.
    pub fn bias_terms(&self, beta: &[f64], privacy: &PrivacyConfig) -> BiasTermsCLS {
        let p = beta.len();
        let l2 = privacy.lambda2;
        let lx = privacy.lambda2_x;
        let kappa = lx * privacy.protected_norm2(beta);
        let mut ds = vec![0.0; p + 1];
        let mut dh = Mat::<f64>::zeros(p + 1, p + 1);
        if l2 == 0.0 && lx == 0.0 {
            return BiasTermsCLS { ds, dh, excess: 0.0 };
        }
        // tr(G^2 D^2) and its rho-derivatives.
        let t1 = self.trace(TraceSpec::GGDD);
        let t1_r = 2.0 * self.trace(TraceSpec::GGDD1) - 2.0 * self.trace(TraceSpec::GDDWb);
        let t1_rr = 2.0 * self.trace(TraceSpec::GGD1D1DD2) - 8.0 * self.trace(TraceSpec::WbDD1G)
            + 2.0 * self.trace(TraceSpec::WbDDWb)
            + 4.0 * self.trace(TraceSpec::GDDWtW);
        // tr(G D^2) = sum_i d_i, so its derivatives are sums of d', d''.
        let t2 = self.trace(TraceSpec::GDD);
        let t2_r: f64 = self.d.ddiag.iter().sum();
        let t2_rr: f64 = self.d.dddiag.iter().sum();

        ds[0] = l2 * t1_r + kappa * t2_r;
        dh[(0, 0)] = l2 * t1_rr + kappa * t2_rr;
        for j in privacy.p1..p {
            ds[j + 1] = 2.0 * lx * t2 * beta[j];
            dh[(0, j + 1)] = 2.0 * lx * t2_r * beta[j];
            dh[(j + 1, 0)] = dh[(0, j + 1)];
            dh[(j + 1, j + 1)] = 2.0 * lx * t2;
        }
        BiasTermsCLS { ds, dh, excess: l2 * t1 + kappa * t2 }
    }

    pub fn corrected(&self, d: &ObservedData, beta: &[f64]) -> (Vec<f64>, Mat<f64>) {
        let (g, h) = self.derivatives(d, beta);
        let b = self.bias_terms(beta, &d.privacy);
        let k = g.len();
        let s = (0..k).map(|i| g[i] - b.ds[i]).collect();
        let h = Mat::from_fn(k, k, |i, j| h[(i, j)] - b.dh[(i, j)]);
        (s, h)
    }
}

struct RFamily {
    r: Vec<f64>,
    r_rho: Vec<f64>,
    r_beta: Vec<Vec<f64>>,
    r_rho_rho: Vec<f64>,
    r_rho_beta: Vec<Vec<f64>>,
}

/// Bias of the raw least-squares score and Hessian over gamma, plus the
/// objective excess `g` itself.
#[derive(Debug, Clone)]
pub struct BiasTermsCLS {
    pub ds: Vec<f64>,
    pub dh: Mat<f64>,
    pub excess: f64,
}

fn split(gamma: &[f64]) -> (f64, &[f64]) {
    (gamma[0], &gamma[1..])
}

pub fn ls_objective(gamma: &[f64], d: &ObservedData) -> f64 {
    let (rho, beta) = split(gamma);
    ClsWorkspace::new(&d.w, rho).objective(d, beta)
}

/// `L_LS* - g`, whose gradient is the corrected score.
pub fn corrected_ls_objective(gamma: &[f64], d: &ObservedData) -> f64 {
    let (rho, beta) = split(gamma);
    let ws = ClsWorkspace::new(&d.w, rho);
    ws.objective(d, beta) - ws.bias_terms(beta, &d.privacy).excess
}

pub fn ls_score_raw(gamma: &[f64], d: &ObservedData) -> Vec<f64> {
    let (rho, beta) = split(gamma);
    ClsWorkspace::new(&d.w, rho).score(d, beta)
}

pub fn ls_hessian_raw(gamma: &[f64], d: &ObservedData) -> Mat<f64> {
    let (rho, beta) = split(gamma);
    ClsWorkspace::new(&d.w, rho).derivatives(d, beta).1
}

pub fn ls_bias_terms(gamma: &[f64], w: &WeightMatrix, privacy: &PrivacyConfig) -> BiasTermsCLS {
    let (rho, beta) = split(gamma);
    ClsWorkspace::new(w, rho).bias_terms(beta, privacy)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClsState {
    pub gamma: Vec<f64>,
    pub score_corrected: Vec<f64>,
    #[serde(skip)]
    pub hess_corrected: Option<Mat<f64>>,
    pub iter: usize,
    pub step_norm: f64,
    pub damped: bool,
    pub rho_clipped: bool,
}

fn cls_step(
    gamma: &[f64],
    ws: &ClsWorkspace,
    net: &ClsNetwork,
    d: &ObservedData,
    opts: &FitOptions,
) -> Result<(Vec<f64>, bool, bool)> {
    let (score, hess) = ws.corrected(d, &gamma[1..]);
    let (mut next, damped) = safeguarded_step(gamma, &score, &hess, opts, |g| {
        let w = ClsWorkspace::from_network(net, g[0]);
        Ok(w.objective(d, &g[1..]) - w.bias_terms(&g[1..], &d.privacy).excess)
    })?;
    let clipped = next[0].abs() > opts.rho_clip;
    next[0] = next[0].clamp(-opts.rho_clip, opts.rho_clip);
    Ok((next, damped, clipped))
}

/// Corrected Newton iteration on gamma from `init` (length p + 1). The
/// reported sigma^2 is the moment estimate at the final gamma.
pub fn fit_cls(d: &ObservedData, init: &[f64], opts: &FitOptions) -> Result<FitResult> {
    let start = Instant::now();
    let net = ClsNetwork::new(&d.w);
    let mut gamma = init.to_vec();
    let mut trace = vec![gamma.clone()];
    let mut diag = Diagnostics::default();
    let mut converged = false;
    let mut iter = 0;
    while iter < opts.max_iter {
        iter += 1;
        let ws = ClsWorkspace::from_network(&net, gamma[0]);
        let (next, damped, clipped) = cls_step(&gamma, &ws, &net, d, opts)?;
        diag.damped_steps += damped as usize;
        diag.rho_clipped += clipped as usize;
        let step: f64 = next.iter().zip(&gamma).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        gamma = next;
        trace.push(gamma.clone());
        if !step.is_finite() {
            return Err(crate::error::PsarError::SingularCorrectedHessian);
        }
        if step < opts.tol {
            converged = true;
            break;
        }
    }
    diag.max_iter_hit = !converged;
    let s2 = sigma2_moment(d, gamma[0], &gamma[1..]);
    diag.sigma2_floored = !(s2 > opts.sigma2_min);
    let point = Theta::new(gamma[0], gamma[1..].to_vec(), s2.max(opts.sigma2_min));
    Ok(FitResult::new(
        EstimatorKind::Cls,
        point,
        trace,
        iter,
        converged,
        start.elapsed().as_secs_f64(),
        diag,
    ))
}

/// Default start: OLS on `(Y*, X*)` with rho = 0.
pub fn ols_init(d: &ObservedData) -> Result<Vec<f64>> {
    let mut g = vec![0.0];
    g.extend(ols(&d.x_star, &d.y_star)?);
    Ok(g)
}

/// One corrected step from `ws.rho` and `beta` on new data (bootstrap).
/// `net` and `ws` must be built from `d.w`.
pub fn one_step(
    net: &ClsNetwork,
    ws: &ClsWorkspace,
    d: &ObservedData,
    beta: &[f64],
    opts: &FitOptions,
) -> Result<Theta> {
    let mut gamma = vec![ws.rho];
    gamma.extend_from_slice(beta);
    let (next, _, _) = cls_step(&gamma, ws, net, d, opts)?;
    let s2 = sigma2_moment(d, next[0], &next[1..]).max(opts.sigma2_min);
    Ok(Theta::new(next[0], next[1..].to_vec(), s2))
}

/// Minimizer of the uncorrected objective, computed independently of the
/// Newton path: beta is profiled out by weighted least squares and rho is
/// found by golden section. Reference for the zero-noise reduction.
pub fn fit_ls_uncorrected(d: &ObservedData) -> Result<Vec<f64>> {
    let net = ClsNetwork::new(&d.w);
    let p = d.p();
    let profile = |rho: f64| -> Result<(f64, Vec<f64>)> {
        let ws = ClsWorkspace::from_network(&net, rho);
        // M = D S'; minimize |M S Y - M X beta|^2 over beta.
        let m = |v: &[f64]| -> Vec<f64> {
            ws.st(v).iter().zip(&ws.d.diag).map(|(a, b)| a * b).collect()
        };
        let sy: Vec<f64> = {
            let wy = net.w.matvec(&d.y_star);
            d.y_star.iter().zip(&wy).map(|(y, z)| y - rho * z).collect()
        };
        let my = m(&sy);
        let mx: Vec<Vec<f64>> = (0..p).map(|j| m(d.x_star.col_as_slice(j))).collect();
        let a = Mat::from_fn(p, p, |i, j| dot(&mx[i], &mx[j]));
        let b: Vec<f64> = mx.iter().map(|c| dot(c, &my)).collect();
        let beta = solve_small(&a, &b)?;
        let mut gamma = vec![rho];
        gamma.extend_from_slice(&beta);
        Ok((ws.objective(d, &beta), gamma))
    };
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-0.995, 0.995);
    let mut x1 = hi - invphi * (hi - lo);
    let mut x2 = lo + invphi * (hi - lo);
    let mut f1 = profile(x1)?.0;
    let mut f2 = profile(x2)?.0;
    while hi - lo > 1e-10 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - invphi * (hi - lo);
            f1 = profile(x1)?.0;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + invphi * (hi - lo);
            f2 = profile(x2)?.0;
        }
    }
    Ok(profile(0.5 * (lo + hi))?.1)
}
