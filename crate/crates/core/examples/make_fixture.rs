//! Writes the synthetic "merchant network" fixture used by the RMSE test:
//! N = 2024 nodes, clustered sparse links (density about 0.3%), four
//! covariates of which the last two are released with noise.
//!
//!     cargo run -p psar --example make_fixture -- tests/fixtures

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use psar::network::{prepare, Adjacency};
use psar::rng::{derive_seed, rng_from_seed, tag};
use psar::sim::{add_privacy_noise, gen_covariates, simulate_sar, write_data_csv};
use psar::{NoiseLaw, PrivacyConfig, Theta};

const N: usize = 2024;
const CLUSTER: usize = 44;
const SEED: u64 = 2024;

fn network() -> Adjacency {
    let mut rng = rng_from_seed(derive_seed(SEED, &[tag::NETWORK]));
    let extra = Poisson::new(5.0).unwrap();
    let mut edges = Vec::new();
    for i in 0..N {
        let k = 1 + extra.sample(&mut rng) as usize;
        let base = i / CLUSTER * CLUSTER;
        let mut picked = Vec::with_capacity(k);
        while picked.len() < k {
            // Mostly within the trading cluster, sometimes anywhere.
            let j = if rng.random::<f64>() < 0.8 {
                base + rng.random_range(0..CLUSTER.min(N - base))
            } else {
                rng.random_range(0..N)
            };
            if j != i && !picked.contains(&j) {
                picked.push(j);
            }
        }
        edges.extend(picked.into_iter().map(|j| (i, j)));
    }
    Adjacency::from_edges(N, edges).unwrap()
}

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "tests/fixtures".into()));
    std::fs::create_dir_all(&dir).unwrap();
    let adj = network();
    let prep = prepare(&adj).unwrap();
    assert_eq!(prep.dropped, 0);
    let theta = Theta::new(0.3, vec![1.0, 0.5, -0.5, 0.8], 4.0);
    let privacy = PrivacyConfig { lambda2: 1.0, lambda2_x: 0.5, p1: 2, p2: 2, noise_law: NoiseLaw::Normal };
    let w = Arc::new(prep.weights);
    let x = gen_covariates(N, theta.p(), derive_seed(SEED, &[tag::COVARIATES]));
    let t = simulate_sar(w, &theta, x, derive_seed(SEED, &[tag::MODEL_ERROR]), NoiseLaw::Normal).unwrap();
    let d = add_privacy_noise(&t, &privacy, derive_seed(SEED, &[tag::PRIVACY_NOISE])).unwrap();
    let ids: Vec<usize> = (0..N).collect();
    write_data_csv(BufWriter::new(File::create(dir.join("merchants.csv")).unwrap()), &ids, &d.y_star, &d.x_star)
        .unwrap();
    adj.write_edge_csv(BufWriter::new(File::create(dir.join("merchants_edges.csv")).unwrap())).unwrap();
    println!("N = {N}, edges = {}, density = {:.4}%", adj.edge_count(), 100.0 * adj.density());
}
