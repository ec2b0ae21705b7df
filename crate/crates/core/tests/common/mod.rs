#![allow(dead_code)]

use std::sync::Arc;

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use psar::harness::Generator;
use psar::network::prepare;
use psar::sim::{add_privacy_noise, gen_covariates, simulate_sar};
use psar::{NoiseLaw, ObservedData, PrivacyConfig, Theta, WeightMatrix};

pub const GENERATORS: [Generator; 3] =
    [Generator::Dyad, Generator::Sbm { blocks: 5 }, Generator::PowerLaw { alpha: 3.0 }];

pub fn theta0() -> Theta {
    Theta::new(0.2, vec![0.3, 0.3], 1.0)
}

pub fn privacy(lambda2: f64, lambda2_x: f64) -> PrivacyConfig {
    PrivacyConfig { lambda2, lambda2_x, p1: 1, p2: 1, noise_law: NoiseLaw::Normal }
}

pub fn network(gen: Generator, n: usize, seed: u64) -> Arc<WeightMatrix> {
    let prep = prepare(&gen.generate(n, seed).unwrap()).unwrap();
    Arc::new(prep.weights)
}

/// One noisy data set on `w` at `theta`.
pub fn observe(w: &Arc<WeightMatrix>, theta: &Theta, cfg: &PrivacyConfig, seed: u64) -> ObservedData {
    let x = gen_covariates(w.n(), theta.p(), seed);
    let t = simulate_sar(Arc::clone(w), theta, x, seed ^ 0x9e37, cfg.noise_law).unwrap();
    add_privacy_noise(&t, cfg, seed ^ 0x7f4a).unwrap()
}

pub fn data(gen: Generator, n: usize, seed: u64, lambda2: f64, lambda2_x: f64) -> ObservedData {
    observe(&network(gen, n, seed), &theta0(), &privacy(lambda2, lambda2_x), seed + 1)
}

pub fn dense_inverse(a: &Mat<f64>) -> Mat<f64> {
    a.partial_piv_lu().inverse()
}

pub fn trace(a: &Mat<f64>) -> f64 {
    (0..a.nrows()).map(|i| a[(i, i)]).sum()
}

/// `max |a - b| / max(1, max |b|)`
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub fn mat_rel_err(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let flat = |m: &Mat<f64>| (0..m.ncols()).flat_map(|j| (0..m.nrows()).map(move |i| (i, j))).map(|(i, j)| m[(i, j)]).collect::<Vec<_>>();
    rel_err(&flat(a), &flat(b))
}

pub mod criteria;
