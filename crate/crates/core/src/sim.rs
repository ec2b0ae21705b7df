//! True SAR responses and the privacy-noise observation model.

use std::io::{Read, Write};
use std::sync::Arc;

use faer::Mat;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{PsarError, Result};
use crate::network::{row_normalize, Adjacency, WeightMatrix};
use crate::rng::{rng_from_seed, PsarRng};

/// `theta = (rho, beta, sigma^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub rho: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

impl Theta {
    pub fn new(rho: f64, beta: Vec<f64>, sigma2: f64) -> Self {
        Self { rho, beta, sigma2 }
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// `(rho, beta..., sigma2)`
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.p() + 2);
        v.push(self.rho);
        v.extend_from_slice(&self.beta);
        v.push(self.sigma2);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= 2);
        Self { rho: v[0], beta: v[1..v.len() - 1].to_vec(), sigma2: v[v.len() - 1] }
    }

    /// `(rho, beta...)`
    pub fn gamma(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.p() + 1);
        v.push(self.rho);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(PsarError::Config(format!("|rho| = {} must be < 1", self.rho.abs())));
        }
        if !(self.sigma2 > 0.0) {
            return Err(PsarError::Config(format!("sigma2 = {} must be > 0", self.sigma2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLaw {
    Normal,
    /// Student t with 6 degrees of freedom, rescaled to the target variance.
    #[serde(rename = "t6")]
    ScaledT6,
}

impl std::str::FromStr for NoiseLaw {
    type Err = PsarError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Ok(NoiseLaw::Normal),
            "t6" | "scaled-t6" | "t" => Ok(NoiseLaw::ScaledT6),
            other => Err(PsarError::Config(format!("unknown noise law `{other}`"))),
        }
    }
}

impl NoiseLaw {
    pub fn name(self) -> &'static str {
        match self {
            NoiseLaw::Normal => "normal",
            NoiseLaw::ScaledT6 => "t6",
        }
    }

    /// One draw with mean 0 and the given variance. A t(6) variate has
    /// variance 1.5, so it is scaled by sqrt(var / 1.5).
    pub fn draw(self, rng: &mut PsarRng, var: f64) -> f64 {
        if var == 0.0 {
            return 0.0;
        }
        match self {
            NoiseLaw::Normal => {
                let z: f64 = StandardNormal.sample(rng);
                z * var.sqrt()
            }
            NoiseLaw::ScaledT6 => {
                let t = StudentT::new(6.0).expect("valid dof").sample(rng);
                t * (var / 1.5).sqrt()
            }
        }
    }

    pub fn draw_vec(self, rng: &mut PsarRng, n: usize, var: f64) -> Vec<f64> {
        (0..n).map(|_| self.draw(rng, var)).collect()
    }
}

/// Noise variances and which covariate columns carry noise. The protected
/// block is always the last `p2` columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub lambda2: f64,
    pub lambda2_x: f64,
    pub p1: usize,
    pub p2: usize,
    pub noise_law: NoiseLaw,
}

impl PrivacyConfig {
    pub fn none(p: usize) -> Self {
        Self { lambda2: 0.0, lambda2_x: 0.0, p1: p, p2: 0, noise_law: NoiseLaw::Normal }
    }

    pub fn p(&self) -> usize {
        self.p1 + self.p2
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if !(self.lambda2 >= 0.0) || !(self.lambda2_x >= 0.0) {
            return Err(PsarError::Config("noise variances must be nonnegative".into()));
        }
        if self.p() != p {
            return Err(PsarError::Dimension(format!(
                "p1 + p2 = {} but X has {p} columns",
                self.p()
            )));
        }
        Ok(())
    }

    /// `||beta_2||^2` over the protected block.
    pub fn protected_norm2(&self, beta: &[f64]) -> f64 {
        beta[self.p1..].iter().map(|b| b * b).sum()
    }
}

#[derive(Debug, Clone)]
pub struct TrueData {
    pub y: Vec<f64>,
    pub x: Mat<f64>,
    pub w: Arc<WeightMatrix>,
    pub e: Vec<f64>,
}

/// What a data user sees: `(Y*, X*, W)` plus the published noise levels.
#[derive(Debug, Clone)]
pub struct ObservedData {
    pub y_star: Vec<f64>,
    pub x_star: Mat<f64>,
    pub w: Arc<WeightMatrix>,
    pub privacy: PrivacyConfig,
}

impl ObservedData {
    pub fn new(
        y_star: Vec<f64>,
        x_star: Mat<f64>,
        w: Arc<WeightMatrix>,
        privacy: PrivacyConfig,
    ) -> Result<Self> {
        let n = w.n();
        if y_star.len() != n || x_star.nrows() != n {
            return Err(PsarError::Dimension(format!(
                "network has {n} nodes, y has {}, X has {} rows",
                y_star.len(),
                x_star.nrows()
            )));
        }
        privacy.validate(x_star.ncols())?;
        Ok(Self { y_star, x_star, w, privacy })
    }

    pub fn n(&self) -> usize {
        self.y_star.len()
    }

    pub fn p(&self) -> usize {
        self.x_star.ncols()
    }

    /// `X* beta`
    pub fn x_beta(&self, beta: &[f64]) -> Vec<f64> {
        mat_vec(&self.x_star, beta)
    }
}

pub fn mat_vec(x: &Mat<f64>, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.nrows()];
    for (j, &bj) in b.iter().enumerate() {
        if bj != 0.0 {
            for (o, &v) in out.iter_mut().zip(x.col_as_slice(j)) {
                *o += bj * v;
            }
        }
    }
    out
}

/// `X' v`
pub fn mat_t_vec(x: &Mat<f64>, v: &[f64]) -> Vec<f64> {
    (0..x.ncols()).map(|j| dot(x.col_as_slice(j), v)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve `(I - rho W) y = b` by the Neumann iteration `y <- b + rho W y`.
/// W is row-stochastic, so the iteration contracts at rate |rho| in the
/// sup norm whenever |rho| < 1.
pub fn solve_s(w: &WeightMatrix, rho: f64, b: &[f64]) -> Result<Vec<f64>> {
    if !(rho.abs() < 1.0) {
        return Err(PsarError::SingularSystem(format!("|rho| = {} >= 1", rho.abs())));
    }
    let mut y = b.to_vec();
    if rho == 0.0 {
        return Ok(y);
    }
    let mut wy = vec![0.0; y.len()];
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let max_iter = ((1e-16f64).ln() / rho.abs().ln()).ceil() as usize + 50;
    for _ in 0..max_iter {
        w.csr().matvec_into(&y, &mut wy);
        let mut delta = 0.0f64;
        for ((yi, &bi), &wyi) in y.iter_mut().zip(b).zip(&wy) {
            let next = bi + rho * wyi;
            delta = delta.max((next - *yi).abs());
            *yi = next;
        }
        if delta <= 1e-15 * scale {
            return Ok(y);
        }
    }
    Err(PsarError::SingularSystem(format!("fixed-point solve stalled at rho = {rho}")))
}

/// Draw `e` and return the true responses `y = S^{-1}(X beta + e)`.
pub fn simulate_sar(
    w: Arc<WeightMatrix>,
    theta: &Theta,
    x: Mat<f64>,
    seed: u64,
    law: NoiseLaw,
) -> Result<TrueData> {
    theta.validate()?;
    if x.nrows() != w.n() || x.ncols() != theta.p() {
        return Err(PsarError::Dimension(format!(
            "X is {}x{}, expected {}x{}",
            x.nrows(),
            x.ncols(),
            w.n(),
            theta.p()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let e = law.draw_vec(&mut rng, w.n(), theta.sigma2);
    let mut b = mat_vec(&x, &theta.beta);
    for (bi, ei) in b.iter_mut().zip(&e) {
        *bi += ei;
    }
    let y = solve_s(&w, theta.rho, &b)?;
    Ok(TrueData { y, x, w, e })
}

/// I.i.d. standard normal covariates.
pub fn gen_covariates(n: usize, p: usize, seed: u64) -> Mat<f64> {
    let mut rng = rng_from_seed(seed);
    let mut x = Mat::<f64>::zeros(n, p);
    for j in 0..p {
        for v in x.col_as_slice_mut(j) {
            *v = rng.sample(StandardNormal);
        }
    }
    x
}

/// Add response noise (law from `cfg`) and normal noise on the last `p2`
/// covariate columns.
pub fn add_privacy_noise(t: &TrueData, cfg: &PrivacyConfig, seed: u64) -> Result<ObservedData> {
    cfg.validate(t.x.ncols())?;
    let mut rng = rng_from_seed(seed);
    let y_star: Vec<f64> =
        t.y.iter().map(|&y| y + cfg.noise_law.draw(&mut rng, cfg.lambda2)).collect();
    let x_star = perturb_covariates(&t.x, cfg, &mut rng);
    ObservedData::new(y_star, x_star, t.w.clone(), *cfg)
}

pub(crate) fn perturb_covariates(x: &Mat<f64>, cfg: &PrivacyConfig, rng: &mut PsarRng) -> Mat<f64> {
    let mut x_star = x.clone();
    if cfg.lambda2_x > 0.0 {
        for j in cfg.p1..cfg.p() {
            for v in x_star.col_as_slice_mut(j) {
                *v += NoiseLaw::Normal.draw(rng, cfg.lambda2_x);
            }
        }
    }
    x_star
}

/// Write `node_id,y,x1,...,xp`.
pub fn write_data_csv<W: Write>(out: W, node_ids: &[usize], y: &[f64], x: &Mat<f64>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["node_id".to_string(), "y".to_string()];
    header.extend((1..=x.ncols()).map(|j| format!("x{j}")));
    wtr.write_record(&header)?;
    for i in 0..y.len() {
        let mut rec = vec![node_ids[i].to_string(), format_f64(y[i])];
        rec.extend((0..x.ncols()).map(|j| format_f64(x[(i, j)])));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest representation that round-trips.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Rows of a `node_id,y,x1..xp` file, in file order.
#[derive(Debug, Clone)]
pub struct DataTable {
    pub node_ids: Vec<usize>,
    pub y: Vec<f64>,
    pub x: Mat<f64>,
    pub x_names: Vec<String>,
}

pub fn read_data_csv<R: Read>(input: R) -> Result<DataTable> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "node_id" || &headers[1] != "y" {
        return Err(PsarError::Parse("data header must start with `node_id,y`".into()));
    }
    let x_names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let p = x_names.len();
    let mut node_ids = Vec::new();
    let mut y = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != p + 2 {
            return Err(PsarError::Parse(format!("row {} has {} fields", line + 2, rec.len())));
        }
        let bad = |k: usize| PsarError::Parse(format!("row {}, field {}: not a number", line + 2, k + 1));
        node_ids.push(rec[0].trim().parse::<usize>().map_err(|_| bad(0))?);
        y.push(rec[1].trim().parse::<f64>().map_err(|_| bad(1))?);
        for k in 0..p {
            xs.push(rec[k + 2].trim().parse::<f64>().map_err(|_| bad(k + 2))?);
        }
    }
    let n = y.len();
    let x = Mat::from_fn(n, p, |i, j| xs[i * p + j]);
    Ok(DataTable { node_ids, y, x, x_names })
}

/// Match a data table with an edge list keyed by `node_id`. With
/// `drop_isolated`, nodes without out-edges are removed (repeatedly, since a
/// removal can strand others); otherwise they are an error. Returns the data
/// and the node ids that were kept, in row order.
pub fn assemble_observed(
    table: &DataTable,
    edges: &[(usize, usize)],
    privacy: PrivacyConfig,
    drop_isolated: bool,
) -> Result<(ObservedData, Vec<usize>)> {
    let n = table.y.len();
    let mut pos = std::collections::HashMap::with_capacity(n);
    for (row, &id) in table.node_ids.iter().enumerate() {
        if pos.insert(id, row).is_some() {
            return Err(PsarError::Parse(format!("duplicate node_id {id}")));
        }
    }
    let lookup = |id: usize| {
        pos.get(&id).copied().ok_or_else(|| PsarError::Parse(format!("edge references unknown node_id {id}")))
    };
    let mut mapped = Vec::with_capacity(edges.len());
    for &(i, j) in edges {
        mapped.push((lookup(i)?, lookup(j)?));
    }
    let a = Adjacency::from_edges(n, mapped)?;
    let (a, kept) = if drop_isolated {
        let out = a.drop_zero_out_degree();
        (out.adjacency, out.kept)
    } else {
        (a, (0..n).collect())
    };
    let w = Arc::new(row_normalize(&a)?);
    let y: Vec<f64> = kept.iter().map(|&i| table.y[i]).collect();
    let x = Mat::from_fn(kept.len(), table.x.ncols(), |i, j| table.x[(kept[i], j)]);
    let ids = kept.iter().map(|&i| table.node_ids[i]).collect();
    Ok((ObservedData::new(y, x, w, privacy)?, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{row_normalize, Adjacency};

    fn two_cycle() -> Arc<WeightMatrix> {
        Arc::new(row_normalize(&Adjacency::from_edges(2, [(0, 1), (1, 0)]).unwrap()).unwrap())
    }

    #[test]
    fn two_cycle_hand_solve() {
        let w = two_cycle();
        let y = solve_s(&w, 0.5, &[1.0, 1.0]).unwrap();
        assert!((y[0] - 2.0).abs() < 1e-13 && (y[1] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn rho_zero_is_linear_model() {
        let w = two_cycle();
        let x = gen_covariates(2, 2, 1);
        let theta = Theta::new(0.0, vec![0.3, -0.2], 1.0);
        let t = simulate_sar(w, &theta, x.clone(), 4, NoiseLaw::Normal).unwrap();
        let xb = mat_vec(&x, &theta.beta);
        for i in 0..2 {
            assert!((t.y[i] - xb[i] - t.e[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_leaves_data_unchanged() {
        let w = two_cycle();
        let x = gen_covariates(2, 2, 1);
        let t = simulate_sar(w, &Theta::new(0.4, vec![1.0, 1.0], 1.0), x, 2, NoiseLaw::Normal).unwrap();
        let cfg = PrivacyConfig { lambda2: 0.0, lambda2_x: 0.0, p1: 1, p2: 1, noise_law: NoiseLaw::Normal };
        let d = add_privacy_noise(&t, &cfg, 9).unwrap();
        assert_eq!(d.y_star, t.y);
        assert_eq!(d.x_star, t.x);
    }

    #[test]
    fn boundary_rho_is_rejected() {
        assert!(matches!(solve_s(&two_cycle(), 1.0, &[1.0, 1.0]), Err(PsarError::SingularSystem(_))));
    }

    #[test]
    fn data_csv_round_trip() {
        let x = gen_covariates(5, 3, 7);
        let y: Vec<f64> = (0..5).map(|i| i as f64 * 0.1 - 0.123456789).collect();
        let ids: Vec<usize> = (0..5).collect();
        let mut buf = Vec::new();
        write_data_csv(&mut buf, &ids, &y, &x).unwrap();
        let t = read_data_csv(buf.as_slice()).unwrap();
        assert_eq!(t.y, y);
        assert_eq!(t.x, x);
        assert_eq!(t.x_names, vec!["x1", "x2", "x3"]);
    }

    #[test]
    fn theta_vector_round_trip() {
        let t = Theta::new(0.2, vec![0.3, 0.4], 1.1);
        assert_eq!(Theta::from_slice(&t.to_vec()), t);
    }
}
