//! Perturbed-network mode and data generators for the multivariate (MSAR)
//! and multi-mode models. Only generation lives here; estimation for the two
//! extended models is not implemented.

use std::io::Write;

use faer::Mat;
use rand::seq::index;
use rand::Rng;

use crate::error::{PsarError, Result};
use crate::network::{Adjacency, WeightMatrix};
use crate::rng::{derive_seed, rng_from_seed, tag};
use crate::sim::{format_f64, gen_covariates, mat_vec, perturb_covariates, NoiseLaw, PrivacyConfig};
use crate::spmat::{solve_small, CsrMatrix, SFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    /// Toggle uniformly chosen off-diagonal entries of A.
    FlipRandomPairs,
}

#[derive(Debug, Clone, Copy)]
pub struct PerturbSpec {
    pub s: f64,
    pub seed: u64,
    pub mode: PerturbMode,
}

impl PerturbSpec {
    pub fn new(s: f64, seed: u64) -> Self {
        Self { s, seed, mode: PerturbMode::FlipRandomPairs }
    }

    /// `floor(N^s)`
    pub fn flip_count(&self, n: usize) -> usize {
        ((n as f64).powf(self.s) + 1e-9).floor() as usize
    }
}

/// Toggle every listed entry in order.
pub fn apply_flips(a: &Adjacency, flips: &[(usize, usize)]) -> Adjacency {
    let mut out = a.clone();
    for &(i, j) in flips {
        out.flip(i, j);
    }
    out
}

/// Flip exactly `floor(N^s)` distinct off-diagonal entries, chosen uniformly.
/// Draws that leave a node without out-edges are redrawn, up to 100 times.
pub fn perturb_network(a: &Adjacency, spec: &PerturbSpec) -> Result<(Adjacency, Vec<(usize, usize)>)> {
    if !(spec.s > 0.0 && spec.s < 0.5) {
        return Err(PsarError::Config(format!("perturbation exponent {} not in (0, 0.5)", spec.s)));
    }
    let n = a.n();
    if n < 2 {
        return Err(PsarError::Config("cannot perturb a network with fewer than 2 nodes".into()));
    }
    let k = spec.flip_count(n);
    let slots = n * (n - 1);
    let mut last_zero = 0;
    for attempt in 0..100u64 {
        let mut rng = rng_from_seed(derive_seed(spec.seed, &[tag::PERTURB, attempt]));
        let flips: Vec<(usize, usize)> = index::sample(&mut rng, slots, k.min(slots))
            .into_iter()
            .map(|idx| {
                let i = idx / (n - 1);
                let r = idx % (n - 1);
                (i, if r >= i { r + 1 } else { r })
            })
            .collect();
        let out = apply_flips(a, &flips);
        match out.zero_out_degree_nodes().first() {
            None => return Ok((out, flips)),
            Some(&i) => last_zero = i,
        }
    }
    Err(PsarError::ZeroOutDegree(last_zero))
}

/// `Y = W Y D + X B + E` with `q` responses.
#[derive(Debug, Clone)]
pub struct MsarParams {
    /// q x q network-effect matrix
    pub d_mat: Mat<f64>,
    /// p x q coefficients
    pub b_mat: Mat<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone)]
pub struct MsarData {
    pub y: Mat<f64>,
    pub e: Mat<f64>,
    pub x: Mat<f64>,
    pub y_star: Mat<f64>,
    pub x_star: Mat<f64>,
}

/// Spectral radius of a small square matrix.
fn spectral_radius(m: &Mat<f64>) -> Result<f64> {
    let ev = m
        .eigenvalues()
        .map_err(|e| PsarError::SingularSystem(format!("eigenvalues: {e:?}")))?;
    Ok(ev.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Solve `Y = W Y D + B0` by fixed-point iteration. The iteration matrix
/// `D' (x) W` has spectral radius `rho(D)` because W is row-stochastic.
pub fn solve_msar(w: &WeightMatrix, d_mat: &Mat<f64>, b0: &Mat<f64>) -> Result<Mat<f64>> {
    let q = d_mat.nrows();
    let r = spectral_radius(d_mat)?;
    if !(r < 1.0) {
        return Err(PsarError::SingularSystem(format!("spectral radius of D is {r:.4} >= 1")));
    }
    let n = w.n();
    let mut y = b0.clone();
    if d_mat.norm_max() == 0.0 {
        return Ok(y);
    }
    let scale = b0.norm_max().max(1e-300);
    let mut wy = Mat::<f64>::zeros(n, q);
    for _ in 0..100_000 {
        for k in 0..q {
            w.csr().matvec_into(y.col_as_slice(k), wy.col_as_slice_mut(k));
        }
        let mut delta = 0.0f64;
        for j in 0..q {
            for i in 0..n {
                let mut v = b0[(i, j)];
                for k in 0..q {
                    let dkj = d_mat[(k, j)];
                    if dkj != 0.0 {
                        v += wy[(i, k)] * dkj;
                    }
                }
                delta = delta.max((v - y[(i, j)]).abs());
                y[(i, j)] = v;
            }
        }
        if delta <= 1e-15 * scale {
            return Ok(y);
        }
    }
    Err(PsarError::SingularSystem("MSAR fixed-point solve stalled".into()))
}

/// Draw `E` column by column from `seed` (column k continues the same
/// stream), then solve for `Y`. With q = 1 this reproduces
/// [`crate::sim::simulate_sar`] for the same seed.
pub fn simulate_msar(
    w: &WeightMatrix,
    params: &MsarParams,
    x: Mat<f64>,
    law: NoiseLaw,
    seed: u64,
) -> Result<(Mat<f64>, Mat<f64>)> {
    let n = w.n();
    let q = params.d_mat.nrows();
    if params.d_mat.ncols() != q || params.b_mat.ncols() != q || params.b_mat.nrows() != x.ncols() {
        return Err(PsarError::Dimension("MSAR parameter shapes do not match".into()));
    }
    if x.nrows() != n {
        return Err(PsarError::Dimension("X rows must match the network".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut e = Mat::<f64>::zeros(n, q);
    for k in 0..q {
        for v in e.col_as_slice_mut(k) {
            *v = law.draw(&mut rng, params.sigma2);
        }
    }
    let mut b0 = Mat::<f64>::zeros(n, q);
    for k in 0..q {
        let bk: Vec<f64> = (0..x.ncols()).map(|j| params.b_mat[(j, k)]).collect();
        let xb = mat_vec(&x, &bk);
        for i in 0..n {
            b0[(i, k)] = xb[i] + e[(i, k)];
        }
    }
    let y = solve_msar(w, &params.d_mat, &b0)?;
    Ok((y, e))
}

/// Covariates, responses and privacy noise for one MSAR data set.
pub fn gen_msar(
    w: &WeightMatrix,
    params: &MsarParams,
    privacy: &PrivacyConfig,
    seed: u64,
) -> Result<MsarData> {
    let p = params.b_mat.nrows();
    privacy.validate(p)?;
    let x = gen_covariates(w.n(), p, derive_seed(seed, &[tag::COVARIATES]));
    let (y, e) =
        simulate_msar(w, params, x.clone(), privacy.noise_law, derive_seed(seed, &[tag::MODEL_ERROR]))?;
    let mut rng = rng_from_seed(derive_seed(seed, &[tag::PRIVACY_NOISE]));
    let mut y_star = y.clone();
    for k in 0..y.ncols() {
        for v in y_star.col_as_slice_mut(k) {
            *v += privacy.noise_law.draw(&mut rng, privacy.lambda2);
        }
    }
    let x_star = perturb_covariates(&x, privacy, &mut rng);
    Ok(MsarData { y, e, x, y_star, x_star })
}

/// `Y_k = sum_{l != k} rho_kl W_kl Y_l + X_k beta_k + eps_k`.
#[derive(Debug, Clone)]
pub struct MultiModeParams {
    pub n: usize,
    pub k_groups: usize,
    /// K x K, zero diagonal
    pub rho_cross: Mat<f64>,
    pub betas: Vec<Vec<f64>>,
    pub group_sizes: Vec<usize>,
    pub sigma2: f64,
}

impl MultiModeParams {
    pub fn validate(&self) -> Result<()> {
        let k = self.k_groups;
        if self.group_sizes.len() != k || self.betas.len() != k {
            return Err(PsarError::Config(format!("expected {k} group sizes and coefficient vectors")));
        }
        let total: usize = self.group_sizes.iter().sum();
        if total != self.n {
            return Err(PsarError::Config(format!("group sizes sum to {total}, not N = {}", self.n)));
        }
        if self.group_sizes.contains(&0) {
            return Err(PsarError::Config("every group needs at least one node".into()));
        }
        if self.rho_cross.nrows() != k || self.rho_cross.ncols() != k {
            return Err(PsarError::Config("rho_cross must be K x K".into()));
        }
        if (0..k).any(|i| self.rho_cross[(i, i)] != 0.0) {
            return Err(PsarError::Config("rho_cross must have a zero diagonal".into()));
        }
        let p = self.betas[0].len();
        if self.betas.iter().any(|b| b.len() != p) {
            return Err(PsarError::Config("all groups need the same number of covariates".into()));
        }
        if !(self.sigma2 > 0.0) {
            return Err(PsarError::Config("sigma2 must be positive".into()));
        }
        Ok(())
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for &s in &self.group_sizes {
            off.push(off.last().unwrap() + s);
        }
        off
    }
}

/// Row-normalized cross-group blocks `W_kl` (`None` on the diagonal). Each
/// node links to every node of another group with probability
/// `min(1, 5 / n_l)`, and to at least one of them.
pub fn multimode_blocks(sizes: &[usize], seed: u64) -> Vec<Vec<Option<CsrMatrix>>> {
    let mut rng = rng_from_seed(derive_seed(seed, &[tag::NETWORK]));
    let k = sizes.len();
    let mut blocks = vec![vec![None; k]; k];
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let (na, nb) = (sizes[a], sizes[b]);
            let prob = (5.0 / nb as f64).min(1.0);
            let mut trip = Vec::new();
            for i in 0..na {
                let mut row: Vec<usize> = (0..nb).filter(|_| rng.random::<f64>() < prob).collect();
                if row.is_empty() {
                    row.push(rng.random_range(0..nb));
                }
                let wgt = 1.0 / row.len() as f64;
                trip.extend(row.into_iter().map(|j| (i, j, wgt)));
            }
            blocks[a][b] = Some(CsrMatrix::from_triplets(na, nb, &trip));
        }
    }
    blocks
}

/// Stack `rho_kl W_kl` into one N x N sparse matrix.
pub fn stack_multimode(params: &MultiModeParams, blocks: &[Vec<Option<CsrMatrix>>]) -> CsrMatrix {
    let off = params.offsets();
    let mut trip = Vec::new();
    for (a, row) in blocks.iter().enumerate() {
        for (b, blk) in row.iter().enumerate() {
            let rho = params.rho_cross[(a, b)];
            if let (Some(m), true) = (blk, rho != 0.0) {
                trip.extend(m.iter().map(|(i, j, v)| (off[a] + i, off[b] + j, rho * v)));
            }
        }
    }
    CsrMatrix::from_triplets(params.n, params.n, &trip)
}

#[derive(Debug, Clone)]
pub struct GroupedData {
    pub group: Vec<usize>,
    pub y: Vec<f64>,
    pub x: Mat<f64>,
    pub y_star: Vec<f64>,
    pub x_star: Mat<f64>,
    pub system: CsrMatrix,
}

/// Solve `(I - M) y = b` for the stacked multi-mode system: fixed-point
/// iteration when the row sums of |M| are below 1, dense LU otherwise.
pub fn solve_stacked(m: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = m.nrows();
    let norm = (0..n).map(|i| m.row(i).1.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    if norm < 0.999 {
        let mut y = b.to_vec();
        let mut my = vec![0.0; n];
        let scale = b.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        for _ in 0..100_000 {
            m.matvec_into(&y, &mut my);
            let mut delta = 0.0f64;
            for i in 0..n {
                let v = b[i] + my[i];
                delta = delta.max((v - y[i]).abs());
                y[i] = v;
            }
            if delta <= 1e-15 * scale {
                return Ok(y);
            }
        }
        return Err(PsarError::SingularSystem("multi-mode fixed-point solve stalled".into()));
    }
    let a = CsrMatrix::identity(n).add_scaled(1.0, m, -1.0).to_dense();
    if n <= 64 {
        return solve_small(&a, b);
    }
    Ok(SFactor::from_dense(&a)?.solve(b))
}

pub fn simulate_multimode(
    params: &MultiModeParams,
    blocks: &[Vec<Option<CsrMatrix>>],
    x: &Mat<f64>,
    law: NoiseLaw,
    seed: u64,
) -> Result<(Vec<f64>, CsrMatrix)> {
    params.validate()?;
    let off = params.offsets();
    let m = stack_multimode(params, blocks);
    let mut rng = rng_from_seed(seed);
    let mut b = vec![0.0; params.n];
    for g in 0..params.k_groups {
        for i in off[g]..off[g + 1] {
            let xb: f64 = (0..x.ncols()).map(|j| x[(i, j)] * params.betas[g][j]).sum();
            b[i] = xb + law.draw(&mut rng, params.sigma2);
        }
    }
    Ok((solve_stacked(&m, &b)?, m))
}

/// Random cross-group network, covariates, responses and privacy noise.
pub fn gen_multimode(params: &MultiModeParams, privacy: &PrivacyConfig, seed: u64) -> Result<GroupedData> {
    params.validate()?;
    let p = params.betas[0].len();
    privacy.validate(p)?;
    let blocks = multimode_blocks(&params.group_sizes, seed);
    let x = gen_covariates(params.n, p, derive_seed(seed, &[tag::COVARIATES]));
    let (y, system) =
        simulate_multimode(params, &blocks, &x, privacy.noise_law, derive_seed(seed, &[tag::MODEL_ERROR]))?;
    let mut rng = rng_from_seed(derive_seed(seed, &[tag::PRIVACY_NOISE]));
    let y_star = y.iter().map(|&v| v + privacy.noise_law.draw(&mut rng, privacy.lambda2)).collect();
    let x_star = perturb_covariates(&x, privacy, &mut rng);
    let off = params.offsets();
    let group = (0..params.n).map(|i| off.partition_point(|&o| o <= i) - 1).collect();
    Ok(GroupedData { group, y, x, y_star, x_star, system })
}

/// `node_id,group,y,x1..xp` with the observed (noisy) values.
pub fn write_grouped_csv<W: Write>(out: W, data: &GroupedData) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let p = data.x_star.ncols();
    let mut header = vec!["node_id".to_string(), "group".into(), "y".into()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    wtr.write_record(&header)?;
    for i in 0..data.y_star.len() {
        let mut rec = vec![i.to_string(), data.group[i].to_string(), format_f64(data.y_star[i])];
        rec.extend((0..p).map(|j| format_f64(data.x_star[(i, j)])));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
