//! Naive quasi-maximum likelihood: the SAR likelihood applied to `(Y*, X*)`
//! as if they were noise free.
//!
//! `beta` and `sigma^2` are concentrated out. With
//! `b0 = (X'X)^{-1} X'Y`, `b1 = (X'X)^{-1} X'WY` we have
//! `beta(rho) = b0 - rho b1` and `N sigma^2(rho) = |e0 - rho e1|^2`, so the
//! profile is a one-dimensional function of rho: golden section to bracket
//! the maximizer, then a few Newton steps using exact Jacobian traces.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{PsarError, Result};
use crate::network::WeightMatrix;
use crate::sim::{dot, mat_t_vec, mat_vec, ObservedData, Theta};
use crate::spmat::{jacobian_traces, solve_small, SFactor, SMatrix};

const RHO_LO: f64 = -0.99;
const RHO_HI: f64 = 0.99;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QmleFit {
    pub theta_hat: Theta,
    /// `log|S| - N/2 log sigma^2 - N/2` at the optimum.
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `X'X` and least-squares solves against it.
pub(crate) fn ols(x: &Mat<f64>, y: &[f64]) -> Result<Vec<f64>> {
    let p = x.ncols();
    let xtx = Mat::from_fn(p, p, |i, j| dot(x.col_as_slice(i), x.col_as_slice(j)));
    solve_small(&xtx, &mat_t_vec(x, y)).map_err(|_| PsarError::RankDeficientX)
}

/// Profile pieces that do not depend on rho.
struct Profile<'a> {
    w: &'a WeightMatrix,
    n: f64,
    b0: Vec<f64>,
    b1: Vec<f64>,
    /// `e0'e0`, `e0'e1`, `e1'e1`
    a: f64,
    b: f64,
    c: f64,
}

impl<'a> Profile<'a> {
    fn new(d: &'a ObservedData) -> Result<Self> {
        let w = d.w.as_ref();
        let wy = w.csr().matvec(&d.y_star);
        let b0 = ols(&d.x_star, &d.y_star)?;
        let b1 = ols(&d.x_star, &wy)?;
        let xb0 = mat_vec(&d.x_star, &b0);
        let xb1 = mat_vec(&d.x_star, &b1);
        let e0: Vec<f64> = d.y_star.iter().zip(&xb0).map(|(y, f)| y - f).collect();
        let e1: Vec<f64> = wy.iter().zip(&xb1).map(|(y, f)| y - f).collect();
        Ok(Self {
            w,
            n: d.n() as f64,
            a: dot(&e0, &e0),
            b: dot(&e0, &e1),
            c: dot(&e1, &e1),
            b0,
            b1,
        })
    }

    fn sigma2(&self, rho: f64) -> f64 {
        (self.a - 2.0 * rho * self.b + rho * rho * self.c) / self.n
    }

    fn beta(&self, rho: f64) -> Vec<f64> {
        self.b0.iter().zip(&self.b1).map(|(b0, b1)| b0 - rho * b1).collect()
    }

    fn value(&self, rho: f64) -> Result<f64> {
        let f = SFactor::new(&SMatrix::new(self.w, rho))?;
        Ok(f.logdet() - 0.5 * self.n * self.sigma2(rho).ln() - 0.5 * self.n)
    }

    /// First and second derivatives of the profile.
    fn derivatives(&self, rho: f64) -> Result<(f64, f64)> {
        let f = SFactor::new(&SMatrix::new(self.w, rho))?;
        let (t1, t2) = jacobian_traces(&f.inverse(), self.w.csr());
        let s2 = self.sigma2(rho);
        let ds = (-2.0 * self.b + 2.0 * rho * self.c) / self.n;
        let dds = 2.0 * self.c / self.n;
        let g = -t1 - 0.5 * self.n * ds / s2;
        let h = -t2 - 0.5 * self.n * (dds * s2 - ds * ds) / (s2 * s2);
        Ok((g, h))
    }
}

/// Maximize the concentrated SAR likelihood over rho in (-0.99, 0.99).
pub fn fit_qmle(d: &ObservedData) -> Result<QmleFit> {
    let n = d.n();
    if n <= d.p() + 2 {
        return Err(PsarError::Dimension(format!("N = {n} too small for p = {}", d.p())));
    }
    let prof = Profile::new(d)?;

    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (RHO_LO, RHO_HI);
    let mut x1 = hi - invphi * (hi - lo);
    let mut x2 = lo + invphi * (hi - lo);
    let mut f1 = prof.value(x1)?;
    let mut f2 = prof.value(x2)?;
    let mut iterations = 0;
    while hi - lo > 1e-3 {
        iterations += 1;
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - invphi * (hi - lo);
            f1 = prof.value(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + invphi * (hi - lo);
            f2 = prof.value(x2)?;
        }
    }
    let mut rho = 0.5 * (lo + hi);
    if rho - RHO_LO < 2e-3 || RHO_HI - rho < 2e-3 {
        return Err(PsarError::NoInteriorMax(rho));
    }

    // Newton polish inside the final bracket (widened a little so a maximizer
    // right at the bracket edge is still reachable).
    let (blo, bhi) = (lo - 1e-3, hi + 1e-3);
    let mut converged = false;
    for _ in 0..20 {
        iterations += 1;
        let (g, h) = prof.derivatives(rho)?;
        if !(h < 0.0) {
            break;
        }
        let next = rho - g / h;
        if !(blo..=bhi).contains(&next) {
            break;
        }
        let step = (next - rho).abs();
        rho = next;
        if step < 1e-10 {
            converged = true;
            break;
        }
    }
    if !converged {
        // The golden bracket is already 1e-3 wide; accept its midpoint only
        // when the gradient there is small relative to the curvature.
        let (g, h) = prof.derivatives(rho)?;
        converged = h < 0.0 && (g / h).abs() < 1e-6;
    }

    let sigma2 = prof.sigma2(rho);
    let theta_hat = Theta::new(rho, prof.beta(rho), sigma2);
    let loglik = prof.value(rho)?;
    Ok(QmleFit { theta_hat, loglik, converged, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{gen_dyad, prepare};
    use crate::sim::{add_privacy_noise, gen_covariates, simulate_sar, NoiseLaw, PrivacyConfig};
    use std::sync::Arc;

    fn data(n: usize, seed: u64, rho: f64) -> ObservedData {
        let w = Arc::new(prepare(&gen_dyad(n, seed).unwrap()).unwrap().weights);
        let x = gen_covariates(w.n(), 2, seed + 1);
        let t = simulate_sar(w, &Theta::new(rho, vec![0.3, 0.3], 1.0), x, seed + 2, NoiseLaw::Normal)
            .unwrap();
        add_privacy_noise(&t, &PrivacyConfig::none(2), seed + 3).unwrap()
    }

    /// Classical SAR negative log-likelihood evaluated directly.
    fn neg_loglik_dense(d: &ObservedData, th: &Theta) -> f64 {
        let s = SMatrix::new(&d.w, th.rho);
        let v: Vec<f64> =
            s.apply(&d.y_star).iter().zip(d.x_beta(&th.beta)).map(|(a, b)| a - b).collect();
        let n = d.n() as f64;
        -crate::spmat::logdet_s(&s).unwrap() + 0.5 * n * th.sigma2.ln() + 0.5 * dot(&v, &v) / th.sigma2
    }

    #[test]
    fn reported_loglik_matches_full_likelihood() {
        let d = data(200, 11, 0.3);
        let fit = fit_qmle(&d).unwrap();
        assert!(fit.converged);
        let full = -neg_loglik_dense(&d, &fit.theta_hat);
        assert!((full - fit.loglik).abs() < 1e-8, "{full} vs {}", fit.loglik);
    }

    #[test]
    fn profile_is_stationary_at_optimum() {
        let d = data(200, 5, -0.2);
        let fit = fit_qmle(&d).unwrap();
        let h = 1e-5;
        let prof = Profile::new(&d).unwrap();
        let f = |r: f64| prof.value(r).unwrap();
        let g = (f(fit.theta_hat.rho + h) - f(fit.theta_hat.rho - h)) / (2.0 * h);
        assert!(g.abs() < 1e-4, "gradient {g}");
    }

    #[test]
    fn rank_deficient_x() {
        let mut d = data(60, 2, 0.1);
        let col: Vec<f64> = d.x_star.col_as_slice(0).to_vec();
        d.x_star.col_as_slice_mut(1).copy_from_slice(&col);
        assert!(matches!(fit_qmle(&d), Err(PsarError::RankDeficientX)));
    }
}
