//! Corrected likelihood estimator.
//!
//! The feasible objective is the noisy-data negative log-likelihood
//!
//! ```text
//! L*(theta) = -log|S| + 1/2 log|Omega| + 1/2 V' Omega^{-1} V,
//! V = S Y* - X* beta,  Omega = sigma^2 I + lambda^2 S S'.
//! ```
//!
//! Substituting `X2*` for `X2` inflates `E L*` by exactly
//! `g(theta) = 1/2 lambda_x^2 |beta_2|^2 tr(Omega^{-1})`, so the score and
//! Hessian biases are the gradient and Hessian of `g`. The estimator runs
//! Newton on the gamma = (rho, beta) block of `L* - g` and refreshes
//! `sigma^2` with a moment formula after every step.
//!
//! Everything that depends only on `(rho, sigma^2)` lives in
//! [`CleWorkspace`]; data enter through a handful of O(N^2) products with
//! `P = Omega^{-1}`. Building a workspace is O(N^3).

use std::time::Instant;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{PsarError, Result};
use crate::inference::{Diagnostics, EstimatorKind, FitResult};
use crate::network::WeightMatrix;
use crate::qmle::fit_qmle;
use crate::sim::{dot, mat_t_vec, ObservedData, PrivacyConfig, Theta};
use crate::spmat::{
    is_spd, jacobian_traces, solve_small, sparse_times_dense, CsrMatrix, OmegaMatrix, SFactor, SMatrix,
};

/// Iteration controls shared by the corrected estimators.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub rho_clip: f64,
    pub sigma2_min: f64,
    pub max_halvings: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 200, rho_clip: 0.995, sigma2_min: 1e-8, max_halvings: 30 }
    }
}

/// `(rho, sigma^2)`-dependent pieces of the likelihood and its derivatives.
pub struct CleWorkspace {
    pub rho: f64,
    pub sigma2: f64,
    pub lambda2: f64,
    n: usize,
    w: CsrMatrix,
    wt: CsrMatrix,
    /// `W_S = W S' + S W' = W + W' - 2 rho W W'`, so `d Omega / d rho = -lambda^2 W_S`.
    ws: CsrMatrix,
    /// `Omega^{-1}`
    p: Mat<f64>,
    logdet_s: f64,
    logdet_omega: f64,
    pub traces: CleTraces,
}

/// Exact traces used by the raw derivatives and the bias terms.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CleTraces {
    /// tr(S^{-1} W)
    pub t1: f64,
    /// tr((S^{-1} W)^2)
    pub t2: f64,
    /// tr(P), tr(P^2), tr(P^3)
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    /// tr(P W_S), tr(P W_S P W_S)
    pub p_ws: f64,
    pub p_ws_p_ws: f64,
    /// tr(P^2 W_S), tr(P^3 W_S), tr(P^2 W_S P W_S)
    pub p2_ws: f64,
    pub p3_ws: f64,
    pub p2_ws_p_ws: f64,
    /// tr(P W W'), tr(P^2 W W')
    pub p_wwt: f64,
    pub p2_wwt: f64,
}

/// Raw derivatives of `L*` over the full `(rho, beta, sigma^2)` vector.
#[derive(Debug, Clone)]
pub struct RawDerivatives {
    pub score: Vec<f64>,
    pub hessian: Mat<f64>,
}

/// Bias of the raw score and Hessian, ordered `(rho, beta, sigma^2)`.
#[derive(Debug, Clone)]
pub struct BiasTermsCLE {
    pub ds: Vec<f64>,
    pub dh: Mat<f64>,
}

/// `(P v)_i = P_i . v`, using the symmetry of P for contiguous access.
fn sym_matvec(p: &Mat<f64>, v: &[f64]) -> Vec<f64> {
    (0..p.ncols()).map(|i| dot(p.col_as_slice(i), v)).collect()
}

/// `sum_ij a_ij b_ji` for dense square matrices.
fn trace_prod_dense(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let n = a.nrows();
    let mut total = 0.0;
    for j in 0..n {
        let ac = a.col_as_slice(j);
        for (i, &v) in ac.iter().enumerate() {
            total += v * b[(j, i)];
        }
    }
    total
}

/// `W_S M = W M + W' M - 2 rho W (W' M)`
fn apply_ws_dense(w: &CsrMatrix, wt: &CsrMatrix, rho: f64, m: &Mat<f64>) -> Mat<f64> {
    let wtm = sparse_times_dense(wt, m);
    let mut out = sparse_times_dense(w, m);
    let w_wtm = sparse_times_dense(w, &wtm);
    for j in 0..m.ncols() {
        let o = out.col_as_slice_mut(j);
        for ((o, a), b) in o.iter_mut().zip(wtm.col_as_slice(j)).zip(w_wtm.col_as_slice(j)) {
            *o += a - 2.0 * rho * b;
        }
    }
    out
}

/// Data-dependent vectors behind the score and Hessian.
struct Products {
    vr: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
    pa: Vec<f64>,
    pvr: Vec<f64>,
    pu: Vec<f64>,
    px: Vec<Vec<f64>>,
}

/// `sum_ij a_ij b_ij`
fn frob_dot(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    (0..a.ncols()).map(|j| dot(a.col_as_slice(j), b.col_as_slice(j))).sum()
}

impl CleWorkspace {
    /// Full workspace: objective pieces plus every trace the Hessian and the
    /// bias terms need.
    pub fn new(w: &WeightMatrix, rho: f64, sigma2: f64, lambda2: f64) -> Result<Self> {
        let n = w.n();
        let s = SMatrix::new(w, rho);
        let sf = SFactor::new(&s)?;
        if sf.sign() <= 0.0 {
            return Err(PsarError::SingularSystem(format!("det S <= 0 at rho = {rho}")));
        }
        let (t1, t2) = jacobian_traces(&sf.inverse(), w.csr());
        let omega = OmegaMatrix::new(&s, sigma2, lambda2)?;
        let p = omega.inverse();

        let wc = w.csr().clone();
        let wt = wc.transpose();
        let wwt = wc.matmul(&wt);
        let ws = wc.add_scaled(1.0, &wt, 1.0).add_scaled(1.0, &wwt, -2.0 * rho);

        let q = &p * &p;
        // B = W_S P, C = W_S P^2, applied through W and W' (W W' has far
        // more nonzeros than W).
        let b = apply_ws_dense(&wc, &wt, rho, &p);
        let c = apply_ws_dense(&wc, &wt, rho, &q);
        let traces = CleTraces {
            t1,
            t2,
            p1: (0..n).map(|i| p[(i, i)]).sum(),
            p2: frob_dot(&p, &p),
            p3: frob_dot(&p, &q),
            p_ws: (0..n).map(|i| b[(i, i)]).sum(),
            p_ws_p_ws: trace_prod_dense(&b, &b),
            p2_ws: (0..n).map(|i| c[(i, i)]).sum(),
            p3_ws: trace_prod_dense(&b, &q),
            p2_ws_p_ws: trace_prod_dense(&b, &c),
            p_wwt: wwt.trace_with_dense(&p),
            p2_wwt: wwt.trace_with_dense(&q),
        };
        Ok(Self {
            rho,
            sigma2,
            lambda2,
            n,
            w: wc,
            wt,
            ws,
            p,
            logdet_s: sf.logdet(),
            logdet_omega: omega.logdet(),
            traces,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn omega_inv(&self) -> &Mat<f64> {
        &self.p
    }

    fn residual(&self, d: &ObservedData, beta: &[f64]) -> Vec<f64> {
        let wy = self.w.matvec(&d.y_star);
        let xb = d.x_beta(beta);
        (0..self.n).map(|i| d.y_star[i] - self.rho * wy[i] - xb[i]).collect()
    }

    /// `L*` at `(rho, beta, sigma^2)` of this workspace.
    pub fn neg_loglik(&self, d: &ObservedData, beta: &[f64]) -> f64 {
        let v = self.residual(d, beta);
        let u = sym_matvec(&self.p, &v);
        -self.logdet_s + 0.5 * self.logdet_omega + 0.5 * dot(&v, &u)
    }

    /// Raw score only (cheaper than [`Self::derivatives`]).
    pub fn score(&self, d: &ObservedData, beta: &[f64]) -> Vec<f64> {
        let l2 = self.lambda2;
        let t = &self.traces;
        let v = self.residual(d, beta);
        let vr: Vec<f64> = self.w.matvec(&d.y_star).iter().map(|x| -x).collect();
        let u = sym_matvec(&self.p, &v);
        let a = self.ws.matvec(&u);
        let mut g = Vec::with_capacity(d.p() + 2);
        g.push(t.t1 - 0.5 * l2 * t.p_ws + dot(&vr, &u) + 0.5 * l2 * dot(&u, &a));
        g.extend(mat_t_vec(&d.x_star, &u).into_iter().map(|x| -x));
        g.push(0.5 * t.p1 - 0.5 * dot(&u, &u));
        g
    }

    /// Raw score and full Hessian of `L*`.
    pub fn derivatives(&self, d: &ObservedData, beta: &[f64]) -> RawDerivatives {
        let v = self.residual(d, beta);
        let vr: Vec<f64> = self.w.matvec(&d.y_star).iter().map(|x| -x).collect();
        let u = sym_matvec(&self.p, &v);
        let a = self.ws.matvec(&u);
        let pa = sym_matvec(&self.p, &a);
        let pvr = sym_matvec(&self.p, &vr);
        let pu = sym_matvec(&self.p, &u);
        let px = (0..d.p()).map(|j| sym_matvec(&self.p, d.x_star.col_as_slice(j))).collect();
        self.assemble(d, Products { vr, u, a, pa, pvr, pu, px })
    }

    /// [`Self::derivatives`] for many data sets sharing this workspace (and
    /// `beta`). The products with `P` become a few matrix-matrix multiplies.
    pub fn derivatives_batch(&self, ds: &[ObservedData], beta: &[f64]) -> Vec<RawDerivatives> {
        let m = ds.len();
        if m == 0 {
            return Vec::new();
        }
        let n = self.n;
        let p = beta.len();
        let mut vmat = Mat::<f64>::zeros(n, m);
        for (k, d) in ds.iter().enumerate() {
            vmat.col_as_slice_mut(k).copy_from_slice(&self.residual(d, beta));
        }
        let umat = &self.p * &vmat;
        // Columns: [A | Vr | U | X*], each block m wide (X* is m p wide).
        let mut rhs = Mat::<f64>::zeros(n, m * (3 + p));
        let mut vrs = Vec::with_capacity(m);
        let mut avs = Vec::with_capacity(m);
        for (k, d) in ds.iter().enumerate() {
            let a = self.ws.matvec(umat.col_as_slice(k));
            let vr: Vec<f64> = self.w.matvec(&d.y_star).iter().map(|x| -x).collect();
            rhs.col_as_slice_mut(k).copy_from_slice(&a);
            rhs.col_as_slice_mut(m + k).copy_from_slice(&vr);
            rhs.col_as_slice_mut(2 * m + k).copy_from_slice(umat.col_as_slice(k));
            for j in 0..p {
                rhs.col_as_slice_mut(3 * m + k * p + j).copy_from_slice(d.x_star.col_as_slice(j));
            }
            vrs.push(vr);
            avs.push(a);
        }
        let prod = &self.p * &rhs;
        ds.iter()
            .zip(vrs.into_iter().zip(avs))
            .enumerate()
            .map(|(k, (d, (vr, a)))| {
                let col = |c: usize| prod.col_as_slice(c).to_vec();
                let pr = Products {
                    vr,
                    u: umat.col_as_slice(k).to_vec(),
                    a,
                    pa: col(k),
                    pvr: col(m + k),
                    pu: col(2 * m + k),
                    px: (0..p).map(|j| col(3 * m + k * p + j)).collect(),
                };
                self.assemble(d, pr)
            })
            .collect()
    }

    fn assemble(&self, d: &ObservedData, pr: Products) -> RawDerivatives {
        let l2 = self.lambda2;
        let l4 = l2 * l2;
        let t = &self.traces;
        let p = d.p();
        let k = p + 2;
        let Products { vr, u, a, pa, pvr, pu, px } = pr;
        let wtu = self.wt.matvec(&u);

        let mut score = Vec::with_capacity(k);
        score.push(t.t1 - 0.5 * l2 * t.p_ws + dot(&vr, &u) + 0.5 * l2 * dot(&u, &a));
        score.extend(mat_t_vec(&d.x_star, &u).into_iter().map(|x| -x));
        score.push(0.5 * t.p1 - 0.5 * dot(&u, &u));

        let mut h = Mat::<f64>::zeros(k, k);
        h[(0, 0)] = t.t2 + l2 * t.p_wwt - 0.5 * l4 * t.p_ws_p_ws
            + dot(&vr, &pvr)
            + 2.0 * l2 * dot(&pvr, &a)
            + l4 * dot(&a, &pa)
            - l2 * dot(&wtu, &wtu);
        let x_pvr = mat_t_vec(&d.x_star, &pvr);
        let x_pa = mat_t_vec(&d.x_star, &pa);
        let x_pu = mat_t_vec(&d.x_star, &pu);
        for j in 0..p {
            let v = -x_pvr[j] - l2 * x_pa[j];
            h[(0, 1 + j)] = v;
            h[(1 + j, 0)] = v;
            h[(1 + j, k - 1)] = x_pu[j];
            h[(k - 1, 1 + j)] = x_pu[j];
        }
        for (j, pxj) in px.iter().enumerate() {
            for i in 0..=j {
                let v = dot(d.x_star.col_as_slice(i), pxj);
                h[(i + 1, j + 1)] = v;
                h[(j + 1, i + 1)] = v;
            }
        }
        let rs = 0.5 * l2 * t.p2_ws - dot(&pvr, &u) - l2 * dot(&a, &pu);
        h[(0, k - 1)] = rs;
        h[(k - 1, 0)] = rs;
        h[(k - 1, k - 1)] = -0.5 * t.p2 + dot(&u, &pu);
        RawDerivatives { score, hessian: h }
    }

    /// Gradient and Hessian of `g = 1/2 lambda_x^2 |beta_2|^2 tr(P)`.
    pub fn bias_terms(&self, beta: &[f64], privacy: &PrivacyConfig) -> BiasTermsCLE {
        let p = beta.len();
        let k = p + 2;
        let lx = privacy.lambda2_x;
        let l2 = self.lambda2;
        let t = &self.traces;
        let kappa = lx * privacy.protected_norm2(beta);
        let tau = t.p1;
        let tau_r = l2 * t.p2_ws;
        let tau_s = -t.p2;
        let tau_rr = 2.0 * l2 * l2 * t.p2_ws_p_ws - 2.0 * l2 * t.p2_wwt;
        let tau_rs = -2.0 * l2 * t.p3_ws;
        let tau_ss = 2.0 * t.p3;

        let mut ds = vec![0.0; k];
        let mut dh = Mat::<f64>::zeros(k, k);
        ds[0] = 0.5 * kappa * tau_r;
        ds[k - 1] = 0.5 * kappa * tau_s;
        dh[(0, 0)] = 0.5 * kappa * tau_rr;
        dh[(0, k - 1)] = 0.5 * kappa * tau_rs;
        dh[(k - 1, 0)] = dh[(0, k - 1)];
        dh[(k - 1, k - 1)] = 0.5 * kappa * tau_ss;
        for j in privacy.p1..p {
            let b = beta[j];
            ds[1 + j] = lx * tau * b;
            dh[(0, 1 + j)] = lx * tau_r * b;
            dh[(1 + j, 0)] = dh[(0, 1 + j)];
            dh[(1 + j, k - 1)] = lx * tau_s * b;
            dh[(k - 1, 1 + j)] = dh[(1 + j, k - 1)];
            dh[(1 + j, 1 + j)] = lx * tau;
        }
        BiasTermsCLE { ds, dh }
    }

    /// Corrected gamma-block score and Hessian.
    pub fn corrected_gamma(&self, d: &ObservedData, beta: &[f64]) -> (Vec<f64>, Mat<f64>) {
        self.correct(&self.derivatives(d, beta), d, beta)
    }

    fn correct(&self, raw: &RawDerivatives, d: &ObservedData, beta: &[f64]) -> (Vec<f64>, Mat<f64>) {
        let bias = self.bias_terms(beta, &d.privacy);
        let k = beta.len() + 1;
        let s: Vec<f64> = (0..k).map(|i| raw.score[i] - bias.ds[i]).collect();
        let h = Mat::from_fn(k, k, |i, j| raw.hessian[(i, j)] - bias.dh[(i, j)]);
        (s, h)
    }
}

/// `L*(theta)` on the observed data.
pub fn neg_loglik(theta: &Theta, d: &ObservedData) -> Result<f64> {
    let s = SMatrix::new(&d.w, theta.rho);
    let sf = SFactor::new(&s)?;
    if sf.sign() <= 0.0 {
        return Err(PsarError::SingularSystem(format!("det S <= 0 at rho = {}", theta.rho)));
    }
    let omega = OmegaMatrix::new(&s, theta.sigma2, d.privacy.lambda2)?;
    let wy = d.w.csr().matvec(&d.y_star);
    let xb = d.x_beta(&theta.beta);
    let v: Vec<f64> = (0..d.n()).map(|i| d.y_star[i] - theta.rho * wy[i] - xb[i]).collect();
    let u = omega.solve_vec(&v);
    Ok(-sf.logdet() + 0.5 * omega.logdet() + 0.5 * dot(&v, &u))
}

/// Bias-corrected objective `L* - g`; its gradient is the corrected score.
pub fn corrected_objective(theta: &Theta, d: &ObservedData) -> Result<f64> {
    let s = SMatrix::new(&d.w, theta.rho);
    let omega = OmegaMatrix::new(&s, theta.sigma2, d.privacy.lambda2)?;
    let kappa = d.privacy.lambda2_x * d.privacy.protected_norm2(&theta.beta);
    let tr_p = if kappa == 0.0 { 0.0 } else { omega.inverse().diagonal().column_vector().sum() };
    Ok(neg_loglik(theta, d)? - 0.5 * kappa * tr_p)
}

/// Raw score of `L*` over `(rho, beta, sigma^2)`.
pub fn score_raw(theta: &Theta, d: &ObservedData) -> Result<Vec<f64>> {
    let ws = CleWorkspace::new(&d.w, theta.rho, theta.sigma2, d.privacy.lambda2)?;
    Ok(ws.score(d, &theta.beta))
}

/// Raw Hessian of `L*` restricted to gamma = (rho, beta).
pub fn hessian_raw(theta: &Theta, d: &ObservedData) -> Result<Mat<f64>> {
    let h = hessian_full(theta, d)?;
    let k = theta.p() + 1;
    Ok(Mat::from_fn(k, k, |i, j| h[(i, j)]))
}

/// Raw Hessian of `L*` over `(rho, beta, sigma^2)`.
pub fn hessian_full(theta: &Theta, d: &ObservedData) -> Result<Mat<f64>> {
    let ws = CleWorkspace::new(&d.w, theta.rho, theta.sigma2, d.privacy.lambda2)?;
    Ok(ws.derivatives(d, &theta.beta).hessian)
}

pub fn bias_terms(theta: &Theta, w: &WeightMatrix, privacy: &PrivacyConfig) -> Result<BiasTermsCLE> {
    let ws = CleWorkspace::new(w, theta.rho, theta.sigma2, privacy.lambda2)?;
    Ok(ws.bias_terms(&theta.beta, privacy))
}

/// Moment update `sigma^2 = N^{-1}[|S Y* - X* beta|^2 - lambda^2 tr(S S')] -
/// lambda_x^2 |beta_2|^2`. Unfloored.
pub fn sigma2_moment(d: &ObservedData, rho: f64, beta: &[f64]) -> f64 {
    let s = SMatrix::new(&d.w, rho);
    let sy = s.apply(&d.y_star);
    let xb = d.x_beta(beta);
    let rss: f64 = sy.iter().zip(&xb).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = d.n() as f64;
    (rss - d.privacy.lambda2 * s.trace_sst()) / n
        - d.privacy.lambda2_x * d.privacy.protected_norm2(beta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleState {
    pub theta: Theta,
    pub score_corrected: Vec<f64>,
    #[serde(skip)]
    pub hess_corrected: Option<Mat<f64>>,
    pub iter: usize,
    pub step_norm: f64,
    pub damped: bool,
    pub rho_clipped: bool,
    pub sigma2_floored: bool,
}

impl CleState {
    pub fn new(theta: Theta) -> Self {
        Self {
            theta,
            score_corrected: Vec::new(),
            hess_corrected: None,
            iter: 0,
            step_norm: f64::INFINITY,
            damped: false,
            rho_clipped: false,
            sigma2_floored: false,
        }
    }
}

/// Gamma step from a corrected score/Hessian pair: the full Newton step when
/// the Hessian is positive definite, otherwise a halving search on
/// `objective` along the Newton direction (or steepest descent when that is
/// not a descent direction).
pub(crate) fn safeguarded_step(
    gamma: &[f64],
    score: &[f64],
    hess: &Mat<f64>,
    opts: &FitOptions,
    mut objective: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<(Vec<f64>, bool)> {
    let k = gamma.len();
    let newton = solve_small(hess, score).map(|x| x.into_iter().map(|v| -v).collect::<Vec<_>>());
    if is_spd(hess) {
        let dir = newton.map_err(|_| PsarError::SingularCorrectedHessian)?;
        return Ok(((0..k).map(|i| gamma[i] + dir[i]).collect(), false));
    }
    let dir = match newton {
        Ok(dir) if dot(&dir, score) < 0.0 => dir,
        _ => score.iter().map(|v| -v).collect(),
    };
    let f0 = objective(gamma)?;
    let mut t = 1.0;
    for _ in 0..=opts.max_halvings {
        let mut cand: Vec<f64> = (0..k).map(|i| gamma[i] + t * dir[i]).collect();
        cand[0] = cand[0].clamp(-opts.rho_clip, opts.rho_clip);
        if let Ok(f) = objective(&cand) {
            if f < f0 {
                return Ok((cand, true));
            }
        }
        t *= 0.5;
    }
    Err(PsarError::SingularCorrectedHessian)
}

/// One iteration: corrected Newton on gamma, then the sigma^2 moment update.
pub fn cle_step(state: &CleState, d: &ObservedData, opts: &FitOptions) -> Result<CleState> {
    let th = &state.theta;
    let ws = CleWorkspace::new(&d.w, th.rho, th.sigma2, d.privacy.lambda2)?;
    step_with_workspace(state, &ws, d, opts)
}

fn step_with_workspace(
    state: &CleState,
    ws: &CleWorkspace,
    d: &ObservedData,
    opts: &FitOptions,
) -> Result<CleState> {
    step_from_derivatives(state, ws, &ws.derivatives(d, &state.theta.beta), d, opts)
}

fn step_from_derivatives(
    state: &CleState,
    ws: &CleWorkspace,
    raw: &RawDerivatives,
    d: &ObservedData,
    opts: &FitOptions,
) -> Result<CleState> {
    let th = &state.theta;
    let (score, hess) = ws.correct(raw, d, &th.beta);
    let gamma = th.gamma();
    let sigma2 = th.sigma2;
    let (mut next, damped) = safeguarded_step(&gamma, &score, &hess, opts, |g| {
        corrected_objective(&Theta::new(g[0], g[1..].to_vec(), sigma2), d)
    })?;
    let rho_clipped = next[0].abs() > opts.rho_clip;
    next[0] = next[0].clamp(-opts.rho_clip, opts.rho_clip);
    let beta = next[1..].to_vec();
    let s2 = sigma2_moment(d, next[0], &beta);
    let sigma2_floored = !(s2 > opts.sigma2_min);
    let s2 = if sigma2_floored { opts.sigma2_min } else { s2 };
    let theta = Theta::new(next[0], beta, s2);
    let step_norm = theta
        .to_vec()
        .iter()
        .zip(th.to_vec())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(CleState {
        theta,
        score_corrected: score,
        hess_corrected: Some(hess),
        iter: state.iter + 1,
        step_norm,
        damped,
        rho_clipped,
        sigma2_floored,
    })
}

/// Iterate [`cle_step`] from `init` until the Euclidean change in theta drops
/// below `opts.tol`. Non-convergence is reported through the flag, not an
/// error.
pub fn fit_cle(d: &ObservedData, init: &Theta, opts: &FitOptions) -> Result<FitResult> {
    let start = Instant::now();
    let mut state = CleState::new(init.clone());
    let mut trace = vec![init.to_vec()];
    let mut diag = Diagnostics::default();
    let mut converged = false;
    while state.iter < opts.max_iter {
        state = cle_step(&state, d, opts)?;
        trace.push(state.theta.to_vec());
        diag.damped_steps += state.damped as usize;
        diag.rho_clipped += state.rho_clipped as usize;
        diag.sigma2_floored |= state.sigma2_floored;
        if !state.step_norm.is_finite() {
            return Err(PsarError::SingularCorrectedHessian);
        }
        if state.step_norm < opts.tol {
            converged = true;
            break;
        }
    }
    diag.max_iter_hit = !converged;
    Ok(FitResult::new(
        EstimatorKind::Cle,
        state.theta,
        trace,
        state.iter,
        converged,
        start.elapsed().as_secs_f64(),
        diag,
    ))
}

/// QMLE start followed by [`fit_cle`].
pub fn fit_cle_from_qmle(d: &ObservedData, opts: &FitOptions) -> Result<FitResult> {
    let init = fit_qmle(d)?.theta_hat;
    fit_cle(d, &init, opts)
}

/// One corrected Newton step from `ws`'s `(rho, sigma^2)` and `beta` on new
/// data, followed by the sigma^2 update. Used by the one-step bootstrap,
/// where the workspace built at the point estimate is shared by every
/// bootstrap sample.
pub fn one_step(ws: &CleWorkspace, d: &ObservedData, beta: &[f64], opts: &FitOptions) -> Result<Theta> {
    let th = Theta::new(ws.rho, beta.to_vec(), ws.sigma2);
    let st = step_with_workspace(&CleState::new(th), ws, d, opts)?;
    Ok(st.theta)
}

/// [`one_step`] on many data sets, with the products batched.
pub fn one_step_batch(
    ws: &CleWorkspace,
    ds: &[ObservedData],
    beta: &[f64],
    opts: &FitOptions,
) -> Vec<Result<Theta>> {
    let start = CleState::new(Theta::new(ws.rho, beta.to_vec(), ws.sigma2));
    ws.derivatives_batch(ds, beta)
        .iter()
        .zip(ds)
        .map(|(raw, d)| step_from_derivatives(&start, ws, raw, d, opts).map(|st| st.theta))
        .collect()
}
