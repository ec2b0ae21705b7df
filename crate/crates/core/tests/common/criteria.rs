//! Checks shared by the focused tests and the acceptance target. Each one
//! panics with a description on failure and returns a one-line summary.

use std::sync::Arc;

use faer::Mat;
use psar::cle::{corrected_objective, fit_cle, hessian_full, neg_loglik, score_raw, CleWorkspace, FitOptions};
use psar::cls::{
    alpha_weights, corrected_ls_objective, fit_cls, fit_ls_uncorrected, ls_hessian_raw, ls_objective,
    ls_score_raw, ols_init, ClsWorkspace,
};
use psar::harness::{run_mc_with_workers, ExperimentConfig, Generator};
use psar::inference::fit_estimator;
use psar::network::row_normalize;
use psar::rng::rng_from_seed;
use psar::sim::{add_privacy_noise, gen_covariates, mat_vec, simulate_sar, solve_s};
use psar::spmat::{
    d_rho_family, dense_trace_products, sparse_trace_products, OmegaMatrix, SFactor, SMatrix,
    SparseTraceCtx, TraceSpec,
};
use psar::{Adjacency, EstimatorKind, ObservedData, Theta, WeightMatrix};
use rand::Rng;

use super::*;

// ---------------------------------------------------------------- score bias

pub const BIAS_DRAWS: usize = 20_000;

#[derive(Default)]
struct Moments {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    n: usize,
}

impl Moments {
    fn push(&mut self, v: &[f64]) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; v.len()];
            self.sumsq = vec![0.0; v.len()];
        }
        for (k, x) in v.iter().enumerate() {
            self.sum[k] += x;
            self.sumsq[k] += x * x;
        }
        self.n += 1;
    }

    /// z-statistic of `mean - target`, per component.
    fn z(&self, target: &[f64]) -> Vec<f64> {
        let n = self.n as f64;
        (0..self.sum.len())
            .map(|k| {
                let m = self.sum[k] / n;
                let var = (self.sumsq[k] / n - m * m) * n / (n - 1.0);
                (m - target[k]) / (var / n).sqrt()
            })
            .collect()
    }
}

/// On a fixed N = 100 dyad network and design, redraw model error and
/// privacy noise at the true parameters: the mean raw score of each
/// objective must equal its analytic bias term (|z| <= 4 per component).
pub fn score_bias(draws: usize) -> String {
    let theta = theta0();
    let cfg = privacy(0.5, 0.5);
    let w = network(Generator::Dyad, 100, 17);
    let x = gen_covariates(w.n(), theta.p(), 18);

    let cle = CleWorkspace::new(&w, theta.rho, theta.sigma2, cfg.lambda2).unwrap();
    let cls = ClsWorkspace::new(&w, theta.rho);
    let cle_bias = cle.bias_terms(&theta.beta, &cfg).ds;
    let cls_bias = cls.bias_terms(&theta.beta, &cfg).ds;

    let (mut m_cle, mut m_cls) = (Moments::default(), Moments::default());
    for r in 0..draws as u64 {
        let t = simulate_sar(Arc::clone(&w), &theta, x.clone(), 1_000_000 + r, cfg.noise_law).unwrap();
        let d = add_privacy_noise(&t, &cfg, 2_000_000 + r).unwrap();
        m_cle.push(&cle.score(&d, &theta.beta));
        m_cls.push(&cls.score(&d, &theta.beta));
    }

    let mut worst = 0.0f64;
    for (name, m, bias) in [("likelihood", &m_cle, &cle_bias), ("least squares", &m_cls, &cls_bias)] {
        let z = m.z(bias);
        let z_naive = m.z(&vec![0.0; bias.len()]);
        for (k, zk) in z.iter().enumerate() {
            assert!(zk.abs() <= 4.0, "{name} component {k}: z = {zk:.2} (all: {z:.2?})");
            worst = worst.max(zk.abs());
        }
        // Power: ignoring the correction must be rejected.
        assert!(z_naive.iter().any(|z| z.abs() > 4.0), "{name}: noise bias not detectable ({z_naive:.2?})");
    }
    format!("{draws} draws, max |z| = {worst:.2} over 7 components")
}

// --------------------------------------------------------------- derivatives

const FD_POINTS: usize = 20;
const FD_H: f64 = 1e-5;

fn random_theta(rng: &mut impl Rng) -> Theta {
    Theta::new(
        rng.random_range(-0.8..0.8),
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        rng.random_range(0.4..2.0),
    )
}

fn bump(v: &[f64], k: usize, h: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    out[k] += h;
    out
}

fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len()).map(|k| (f(&bump(x, k, FD_H)) - f(&bump(x, k, -FD_H))) / (2.0 * FD_H)).collect()
}

/// Column `k` holds the central difference of `g` in coordinate `k`.
fn fd_jacobian(g: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Mat<f64> {
    let mut jac = Mat::<f64>::zeros(g(x).len(), x.len());
    for k in 0..x.len() {
        let (hi, lo) = (g(&bump(x, k, FD_H)), g(&bump(x, k, -FD_H)));
        for i in 0..hi.len() {
            jac[(i, k)] = (hi[i] - lo[i]) / (2.0 * FD_H);
        }
    }
    jac
}

#[derive(Default)]
struct Worst {
    score: f64,
    hessian: f64,
}

impl Worst {
    fn score(&mut self, e: f64, what: &str) {
        assert!(e <= 1e-5, "{what}: score rel err {e:.2e}");
        self.score = self.score.max(e);
    }

    fn hessian(&mut self, e: f64, what: &str) {
        assert!(e <= 1e-4, "{what}: Hessian rel err {e:.2e}");
        self.hessian = self.hessian.max(e);
    }
}

fn check_likelihood(d: &ObservedData, theta: &Theta, worst: &mut Worst, label: &str) {
    let x = theta.to_vec();
    let th = Theta::from_slice;

    // Raw L* over (rho, beta, sigma^2).
    let fd = fd_gradient(|v| neg_loglik(&th(v), d).unwrap(), &x);
    worst.score(rel_err(&fd, &score_raw(theta, d).unwrap()), &format!("{label} raw likelihood"));
    let fd = fd_jacobian(|v| score_raw(&th(v), d).unwrap(), &x);
    worst.hessian(mat_rel_err(&fd, &hessian_full(theta, d).unwrap()), &format!("{label} raw likelihood"));

    // Corrected L* - g over gamma = (rho, beta) at fixed sigma^2.
    let corrected = |v: &[f64]| {
        let ws = CleWorkspace::new(&d.w, v[0], theta.sigma2, d.privacy.lambda2).unwrap();
        ws.corrected_gamma(d, &v[1..])
    };
    let gamma = theta.gamma();
    let (an_s, an_h) = corrected(&gamma);
    let objective = |v: &[f64]| {
        let mut full = v.to_vec();
        full.push(theta.sigma2);
        corrected_objective(&th(&full), d).unwrap()
    };
    worst.score(rel_err(&fd_gradient(objective, &gamma), &an_s), &format!("{label} corrected likelihood"));
    let fd = fd_jacobian(|v| corrected(v).0, &gamma);
    worst.hessian(mat_rel_err(&fd, &an_h), &format!("{label} corrected likelihood"));
}

fn check_least_squares(d: &ObservedData, theta: &Theta, worst: &mut Worst, label: &str) {
    let gamma = theta.gamma();
    let fd = fd_gradient(|v| ls_objective(v, d), &gamma);
    worst.score(rel_err(&fd, &ls_score_raw(&gamma, d)), &format!("{label} raw LS"));
    let fd = fd_jacobian(|v| ls_score_raw(v, d), &gamma);
    worst.hessian(mat_rel_err(&fd, &ls_hessian_raw(&gamma, d)), &format!("{label} raw LS"));

    let corrected = |v: &[f64]| ClsWorkspace::new(&d.w, v[0]).corrected(d, &v[1..]);
    let (an_s, an_h) = corrected(&gamma);
    let fd = fd_gradient(|v| corrected_ls_objective(v, d), &gamma);
    worst.score(rel_err(&fd, &an_s), &format!("{label} corrected LS"));
    let fd = fd_jacobian(|v| corrected(v).0, &gamma);
    worst.hessian(mat_rel_err(&fd, &an_h), &format!("{label} corrected LS"));
}

/// Analytic scores and Hessians of both objectives, raw and corrected,
/// against central differences at 20 random points on each generator.
/// Error: `max |fd - an| / max(1, max |an|)`.
pub fn derivatives(likelihood: bool) -> String {
    let mut all = Worst::default();
    for (g, gen) in GENERATORS.iter().enumerate() {
        let d = data(*gen, 100, 200 + g as u64, 0.5, 0.5);
        let mut rng = rng_from_seed(300 + g as u64);
        for i in 0..FD_POINTS {
            let theta = random_theta(&mut rng);
            let label = format!("{} point {i} {theta:?}", gen.name());
            if likelihood {
                check_likelihood(&d, &theta, &mut all, &label);
            } else {
                check_least_squares(&d, &theta, &mut all, &label);
            }
        }
    }
    format!(
        "{}: worst score err {:.1e}, Hessian err {:.1e}",
        if likelihood { "likelihood" } else { "least squares" },
        all.score,
        all.hessian
    )
}

// ------------------------------------------------------------------- oracles

/// Random directed graph where every node has at least one out-edge.
pub fn random_graph(n: usize, seed: u64) -> WeightMatrix {
    let mut rng = rng_from_seed(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        let forced = (i + 1 + rng.random_range(0..n - 1)) % n;
        edges.push((i, forced));
        for j in 0..n {
            if j != i && j != forced && rng.random::<f64>() < 0.3 {
                edges.push((i, j));
            }
        }
    }
    row_normalize(&Adjacency::from_edges(n, edges).unwrap()).unwrap()
}

/// The least-squares objective equals the sum of squared residuals from the
/// full conditional means, computed pair by pair from the alpha weights.
pub fn conditional_residual_identity() -> String {
    let mut worst = 0.0f64;
    for n in [2usize, 3, 5, 7, 10] {
        for seed in 0..10u64 {
            let w = Arc::new(random_graph(n, seed * 31 + n as u64));
            let d = observe(&w, &theta0(), &privacy(0.5, 0.5), seed);
            let mut rng = rng_from_seed(seed + 1000);
            let rho = rng.random_range(-0.9..0.9);
            let beta = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            // mu = S^{-1} X beta, E(Y_i | Y_-i) = mu_i + sum_j alpha_ij (Y_j - mu_j).
            let mu = solve_s(&w, rho, &mat_vec(&d.x_star, &beta)).unwrap();
            let y = &d.y_star;
            let brute: f64 = (0..n)
                .map(|i| {
                    let cond = mu[i]
                        + (0..n)
                            .filter(|&j| j != i)
                            .map(|j| alpha_weights(&w, rho, i, j) * (y[j] - mu[j]))
                            .sum::<f64>();
                    (y[i] - cond).powi(2)
                })
                .sum();
            let mut gamma = vec![rho];
            gamma.extend(&beta);
            let fast = ls_objective(&gamma, &d);
            let err = (fast - brute).abs() / brute.max(1.0);
            assert!(err <= 1e-9, "n={n} seed={seed}: {fast} vs {brute}");
            worst = worst.max(err);
        }
    }
    format!("conditional-residual identity, N in 2..10: worst rel err {worst:.1e}")
}

pub fn sparse_traces() -> String {
    let mut worst = 0.0f64;
    for (g, gen) in GENERATORS.iter().enumerate() {
        let w = network(*gen, 100, 40 + g as u64);
        for rho in [-0.6, 0.0, 0.35, 0.8] {
            let ctx = SparseTraceCtx::new(&w, rho);
            let d = d_rho_family(&w, rho);
            for spec in TraceSpec::ALL {
                let fast = sparse_trace_products(&ctx, &d, spec);
                let slow = dense_trace_products(&w, &d, spec);
                let err = (fast - slow).abs() / slow.abs().max(1.0);
                assert!(err <= 1e-8, "{} rho={rho} {}: {fast} vs {slow}", gen.name(), spec.name());
                worst = worst.max(err);
            }
        }
    }
    format!("15 sparse trace kernels: worst rel err {worst:.1e}")
}

/// Every trace cached by the likelihood workspace, recomputed densely.
pub fn likelihood_traces() -> String {
    let mut worst = 0.0f64;
    for (g, gen) in GENERATORS.iter().enumerate() {
        let w = network(*gen, 90, 70 + g as u64);
        let n = w.n();
        let (rho, sigma2, lambda2) = (0.3, 1.3, 0.6);
        let ws = CleWorkspace::new(&w, rho, sigma2, lambda2).unwrap();
        let wd = w.to_dense();
        let id = Mat::<f64>::identity(n, n);
        let s = &id - rho * &wd;
        let sw = dense_inverse(&s) * &wd;
        let p = dense_inverse(&(sigma2 * &id + lambda2 * (&s * s.transpose())));
        let wwt = &wd * wd.transpose();
        let w_s = &wd + wd.transpose() - 2.0 * rho * &wwt;
        let p2 = &p * &p;
        let want = [
            ("tr(S^-1 W)", trace(&sw)),
            ("tr((S^-1 W)^2)", trace(&(&sw * &sw))),
            ("tr P", trace(&p)),
            ("tr P^2", trace(&p2)),
            ("tr P^3", trace(&(&p2 * &p))),
            ("tr P Ws", trace(&(&p * &w_s))),
            ("tr P Ws P Ws", trace(&(&p * &w_s * &p * &w_s))),
            ("tr P^2 Ws", trace(&(&p2 * &w_s))),
            ("tr P^3 Ws", trace(&(&p2 * &p * &w_s))),
            ("tr P^2 Ws P Ws", trace(&(&p2 * &w_s * &p * &w_s))),
            ("tr P WW'", trace(&(&p * &wwt))),
            ("tr P^2 WW'", trace(&(&p2 * &wwt))),
        ];
        let t = ws.traces;
        let got = [t.t1, t.t2, t.p1, t.p2, t.p3, t.p_ws, t.p_ws_p_ws, t.p2_ws, t.p3_ws, t.p2_ws_p_ws, t.p_wwt, t.p2_wwt];
        for ((name, want), got) in want.iter().zip(got) {
            let err = (want - got).abs() / want.abs().max(1.0);
            assert!(err <= 1e-8, "{} {name}: {got} vs {want}", gen.name());
            worst = worst.max(err);
        }
        assert!(mat_rel_err(ws.omega_inv(), &p) < 1e-10);
    }
    format!("12 likelihood traces: worst rel err {worst:.1e}")
}

fn eigen_logdet(a: &Mat<f64>) -> f64 {
    a.eigenvalues().unwrap().iter().map(|z| z.norm().ln()).sum()
}

pub fn log_determinants() -> String {
    let mut worst = 0.0f64;
    for (g, gen) in GENERATORS.iter().enumerate() {
        let w = network(*gen, 100, 90 + g as u64);
        for rho in [-0.9, -0.3, 0.0, 0.5, 0.95] {
            let s = SMatrix::new(&w, rho);
            let sd = s.to_dense();
            let fast = SFactor::new(&s).unwrap().logdet();
            let slow = eigen_logdet(&sd);
            let err = (fast - slow).abs() / slow.abs().max(1.0);
            assert!(err <= 1e-8, "{} log|S| rho={rho}: {fast} vs {slow}", gen.name());
            worst = worst.max(err);

            let om = OmegaMatrix::new(&s, 0.7, 0.5).unwrap();
            let slow = eigen_logdet(&(0.7 * Mat::<f64>::identity(w.n(), w.n()) + 0.5 * (&sd * sd.transpose())));
            let err = (om.logdet() - slow).abs() / slow.abs().max(1.0);
            assert!(err <= 1e-8, "{} log|Omega| rho={rho}: {} vs {slow}", gen.name(), om.logdet());
            worst = worst.max(err);
        }
    }
    format!("log-determinants vs eigenvalues: worst rel err {worst:.1e}")
}

// ---------------------------------------------------------------- zero noise

/// With lambda^2 = lambda_x^2 = 0 the corrections vanish exactly and the
/// corrected estimators reduce to their uncorrected counterparts.
pub fn zero_noise(seeds: u64) -> String {
    let opts = FitOptions::default();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let d = data(Generator::Dyad, 200, 500 + seed, 0.0, 0.0);
        let gamma = [0.1, 0.5, -0.2];
        let b = psar::cle::bias_terms(&Theta::new(0.1, vec![0.5, -0.2], 0.8), &d.w, &d.privacy).unwrap();
        assert!(b.ds.iter().all(|&v| v == 0.0), "likelihood score correction not zero: {:?}", b.ds);
        assert!((0..b.dh.nrows()).all(|i| (0..b.dh.ncols()).all(|j| b.dh[(i, j)] == 0.0)));
        let b = psar::cls::ls_bias_terms(&gamma, &d.w, &d.privacy);
        assert!(b.excess == 0.0 && b.ds.iter().all(|&v| v == 0.0), "LS correction not zero");
        assert!((0..b.dh.nrows()).all(|i| (0..b.dh.ncols()).all(|j| b.dh[(i, j)] == 0.0)));

        // CLE started away from the QMLE must land on it.
        let q = fit_estimator(EstimatorKind::Qmle, &d, None, &opts).unwrap();
        let c = fit_cle(&d, &theta0(), &opts).unwrap();
        assert!(c.converged, "seed {seed}: CLE did not converge");
        let e = rel_err(&c.point.to_vec(), &q.point.to_vec());
        assert!(e <= 1e-4, "seed {seed}: CLE {:?} vs QMLE {:?}", c.point, q.point);
        worst = worst.max(e);

        let l = fit_cls(&d, &ols_init(&d).unwrap(), &opts).unwrap();
        let u = fit_ls_uncorrected(&d).unwrap();
        let e = rel_err(&l.point.gamma(), &u);
        assert!(e <= 1e-4, "seed {seed}: CLS {:?} vs LS {u:?}", l.point.gamma());
        worst = worst.max(e);
    }
    format!("{seeds} seeds: corrections exactly zero, worst estimator gap {worst:.1e}")
}

// --------------------------------------------------------------- determinism

/// Small `mc` run: raw tables from repeated runs and different worker counts
/// must be byte-identical.
pub fn determinism() -> String {
    let cfg = ExperimentConfig::parse(
        "n = 150\nreplicates = 6\nestimators = qmle,cle,cls\nbootstrap_b = 20\nseed = 77\nlambda2 = 0.4\n",
    )
    .unwrap();
    let runs: Vec<String> =
        [1usize, 1, 2, 4].iter().map(|&w| run_mc_with_workers(&cfg, w).unwrap().raw_csv()).collect();
    for (i, r) in runs.iter().enumerate().skip(1) {
        assert_eq!(r, &runs[0], "run {i} differs from run 0");
    }
    let other = ExperimentConfig { seed: 78, ..cfg };
    assert_ne!(run_mc_with_workers(&other, 2).unwrap().raw_csv(), runs[0], "seed has no effect");
    format!("4 runs (workers 1, 1, 2, 4): identical {}-byte raw tables", runs[0].len())
}
