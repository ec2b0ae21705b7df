//! Linear-algebra kernels shared by the estimators: `S = I - rho W`,
//! `Omega = sigma^2 I + lambda^2 S S'`, their log-determinants and solves,
//! the `d_rho` diagonal family, and exact sparse traces for the least-squares
//! corrections.
//!
//! Omega is factorized densely. For the random networks we care about the
//! Cholesky fill-in of `S S'` is close to complete anyway, and a dense LLT at
//! N = 2000 takes well under a second; the likelihood path is O(N^3) either
//! way. The least-squares path never touches this module's dense types.

mod csr;

pub use csr::CsrMatrix;

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, Side};

use crate::error::{PsarError, Result};
use crate::network::WeightMatrix;

/// `S = I - rho W`, kept lazy.
#[derive(Debug, Clone, Copy)]
pub struct SMatrix<'a> {
    pub rho: f64,
    pub w: &'a WeightMatrix,
}

impl<'a> SMatrix<'a> {
    pub fn new(w: &'a WeightMatrix, rho: f64) -> Self {
        Self { rho, w }
    }

    pub fn n(&self) -> usize {
        self.w.n()
    }

    /// `S v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.w.csr().matvec(v);
        for (o, &x) in out.iter_mut().zip(v) {
            *o = x - self.rho * *o;
        }
        out
    }

    /// `S' v`
    pub fn apply_t(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.w.csr().matvec_t(v);
        for (o, &x) in out.iter_mut().zip(v) {
            *o = x - self.rho * *o;
        }
        out
    }

    pub fn to_csr(&self) -> CsrMatrix {
        CsrMatrix::identity(self.n()).add_scaled(1.0, self.w.csr(), -self.rho)
    }

    pub fn to_dense(&self) -> Mat<f64> {
        self.to_csr().to_dense()
    }

    /// `tr(S S') = N + rho^2 sum_ij w_ij^2` (W has a zero diagonal).
    pub fn trace_sst(&self) -> f64 {
        let sq: f64 = self.w.csr().values().iter().map(|v| v * v).sum();
        self.n() as f64 + self.rho * self.rho * sq
    }
}

/// Dense LU of S. Gives `log|det S|` and, on request, `S^{-1}`.
pub struct SFactor {
    lu: faer::linalg::solvers::PartialPivLu<f64>,
    logdet: f64,
    sign: f64,
}

impl SFactor {
    pub fn new(s: &SMatrix<'_>) -> Result<Self> {
        Self::from_dense(&s.to_dense())
    }

    pub fn from_dense(a: &Mat<f64>) -> Result<Self> {
        let n = a.nrows();
        let lu = a.partial_piv_lu();
        let u = lu.U();
        let mut logdet = 0.0;
        let mut sign = 1.0;
        for i in 0..n {
            let d = u[(i, i)];
            if d == 0.0 || !d.is_finite() {
                return Err(PsarError::SingularSystem(format!("zero pivot at {i}")));
            }
            if d < 0.0 {
                sign = -sign;
            }
            logdet += d.abs().ln();
        }
        if permutation_is_odd(lu.P().arrays().0) {
            sign = -sign;
        }
        Ok(Self { lu, logdet, sign })
    }

    /// `log|det S|`
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn sign(&self) -> f64 {
        self.sign
    }

    pub fn inverse(&self) -> Mat<f64> {
        self.lu.inverse()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        x.col_as_slice(0).to_vec()
    }
}

fn permutation_is_odd(fwd: &[usize]) -> bool {
    let mut seen = vec![false; fwd.len()];
    let mut transpositions = 0usize;
    for start in 0..fwd.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut k = start;
        while !seen[k] {
            seen[k] = true;
            k = fwd[k];
            len += 1;
        }
        transpositions += len - 1;
    }
    transpositions % 2 == 1
}

/// `log det S`; errors if S is singular or its determinant is negative.
pub fn logdet_s(s: &SMatrix<'_>) -> Result<f64> {
    let f = SFactor::new(s)?;
    if f.sign() <= 0.0 {
        return Err(PsarError::SingularSystem(format!(
            "det S is negative at rho = {}",
            s.rho
        )));
    }
    Ok(f.logdet())
}

/// `Omega = sigma^2 I + lambda^2 S S'` with a cached Cholesky factor.
pub struct OmegaMatrix {
    pub sigma2: f64,
    pub lambda2: f64,
    pub rho: f64,
    llt: faer::linalg::solvers::Llt<f64>,
    logdet: f64,
}

impl OmegaMatrix {
    pub fn new(s: &SMatrix<'_>, sigma2: f64, lambda2: f64) -> Result<Self> {
        let dense = Self::assemble(s, sigma2, lambda2);
        Self::from_dense(&dense, s.rho, sigma2, lambda2)
    }

    /// Dense `sigma^2 I + lambda^2 S S'`, built from the sparse product.
    pub fn assemble(s: &SMatrix<'_>, sigma2: f64, lambda2: f64) -> Mat<f64> {
        let n = s.n();
        let mut m = Mat::<f64>::zeros(n, n);
        if lambda2 != 0.0 {
            let sc = s.to_csr();
            let sst = sc.matmul(&sc.transpose());
            for (i, j, v) in sst.iter() {
                m[(i, j)] = lambda2 * v;
            }
        }
        for i in 0..n {
            m[(i, i)] += sigma2;
        }
        m
    }

    fn from_dense(dense: &Mat<f64>, rho: f64, sigma2: f64, lambda2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(PsarError::NotPositiveDefinite(format!("sigma2 = {sigma2}")));
        }
        let llt = dense
            .llt(Side::Lower)
            .map_err(|e| PsarError::NotPositiveDefinite(format!("{e:?}")))?;
        let l = llt.L();
        let logdet = 2.0 * (0..dense.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        Ok(Self { sigma2, lambda2, rho, llt, logdet })
    }

    pub fn n(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn solve(&self, b: &Mat<f64>) -> Mat<f64> {
        self.llt.solve(b)
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        self.llt.solve(&rhs).col_as_slice(0).to_vec()
    }

    pub fn inverse(&self) -> Mat<f64> {
        self.llt.inverse()
    }
}

pub fn logdet_omega(o: &OmegaMatrix) -> f64 {
    o.logdet()
}

pub fn omega_solve(o: &OmegaMatrix, b: &Mat<f64>) -> Mat<f64> {
    o.solve(b)
}

/// One factor of an interleaved product handed to [`trace_omega_inv_prod`].
#[derive(Debug, Clone, Copy)]
pub enum TraceFactor<'a> {
    OmegaInv,
    Sparse(&'a CsrMatrix),
}

/// Exact trace of a product such as `Omega^{-1} W S' Omega^{-1}`, evaluated
/// right to left on a dense N x N block. O(N^3).
pub fn trace_omega_inv_prod(o: &OmegaMatrix, factors: &[TraceFactor<'_>]) -> f64 {
    let n = o.n();
    let mut acc = Mat::<f64>::identity(n, n);
    for f in factors.iter().rev() {
        acc = match f {
            TraceFactor::OmegaInv => o.solve(&acc),
            TraceFactor::Sparse(m) => sparse_times_dense(m, &acc),
        };
    }
    (0..n).map(|i| acc[(i, i)]).sum()
}

/// `sparse * dense`
pub fn sparse_times_dense(a: &CsrMatrix, b: &Mat<f64>) -> Mat<f64> {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = Mat::<f64>::zeros(a.nrows(), b.ncols());
    for c in 0..b.ncols() {
        let src = b.col_as_slice(c);
        let dst = out.col_as_slice_mut(c);
        for (i, d) in dst.iter_mut().enumerate() {
            let (cols, vals) = a.row(i);
            *d = cols.iter().zip(vals).map(|(&j, &v)| v * src[j]).sum();
        }
    }
    out
}

/// `tr(S^{-1} W)` and `tr((S^{-1} W)^2)`: the first two rho-derivatives of
/// `-log|S|` up to sign.
pub fn jacobian_traces(s_inv: &Mat<f64>, w: &CsrMatrix) -> (f64, f64) {
    let t = w.left_mul_dense(s_inv);
    let n = t.nrows();
    let mut tr = 0.0;
    let mut tr2 = 0.0;
    for j in 0..n {
        let col = t.col_as_slice(j);
        tr += col[j];
        for (i, &v) in col.iter().enumerate() {
            tr2 += v * t[(j, i)];
        }
    }
    (tr, tr2)
}

/// Solve a small dense system `a x = b` (p x p covariate blocks, Newton
/// systems). Errors when a pivot is negligible relative to the largest one.
pub fn solve_small(a: &Mat<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let lu = a.partial_piv_lu();
    let u = lu.U();
    let big = (0..n).map(|i| u[(i, i)].abs()).fold(0.0, f64::max);
    if !(big > 0.0) || (0..n).any(|i| !(u[(i, i)].abs() > 1e-13 * big)) {
        return Err(PsarError::SingularSystem("small dense system".into()));
    }
    let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    Ok(lu.solve(&rhs).col_as_slice(0).to_vec())
}

/// Whether a small symmetric matrix is positive definite.
pub fn is_spd(a: &Mat<f64>) -> bool {
    a.llt(Side::Lower).is_ok()
}

/// `d_rho = diag(S'S)^{-1}` and its first two derivatives in rho.
#[derive(Debug, Clone)]
pub struct DRho {
    pub rho: f64,
    pub diag: Vec<f64>,
    pub ddiag: Vec<f64>,
    pub dddiag: Vec<f64>,
    pub col_sq: Vec<f64>,
}

/// Closed forms from `(S'S)_ii = 1 + rho^2 c_i`, `c_i = sum_k w_ki^2`.
pub fn d_rho_family(w: &WeightMatrix, rho: f64) -> DRho {
    d_rho_from_col_sq(w.csr().col_sq_sums(), rho)
}

pub fn d_rho_from_col_sq(col_sq: Vec<f64>, rho: f64) -> DRho {
    let n = col_sq.len();
    let mut diag = Vec::with_capacity(n);
    let mut ddiag = Vec::with_capacity(n);
    let mut dddiag = Vec::with_capacity(n);
    for &c in &col_sq {
        let g = 1.0 + rho * rho * c;
        diag.push(1.0 / g);
        ddiag.push(-2.0 * rho * c / (g * g));
        dddiag.push((-2.0 * c * g + 8.0 * rho * rho * c * c) / (g * g * g));
    }
    DRho { rho, diag, ddiag, dddiag, col_sq }
}

/// Named trace expressions appearing in the least-squares corrections.
/// `G = S'S`, `Wb = W'S + S'W`, `D = d_rho`, `D1`/`D2` its derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceSpec {
    /// tr(G^2 D D1)
    GGDD1,
    /// tr(G D^2 Wb)
    GDDWb,
    /// tr(G D D1)
    GDD1,
    /// tr(S D^2 W')
    SDDWt,
    /// tr(W D^2 S')
    WDDSt,
    /// tr(G D^2)
    GDD,
    /// tr(S D^2 S')
    SDDSt,
    /// tr(Wb D^2 Wb)
    WbDDWb,
    /// tr(G D^2 W'W)
    GDDWtW,
    /// tr(Wb D D1 G)
    WbDD1G,
    /// tr(G^2 (D1^2 + D D2))
    GGD1D1DD2,
    /// tr(W'W D^2)
    WtWDD,
    /// tr(Wb D D1)
    WbDD1,
    /// tr(G (D2 D + D1^2))
    GDD2D1D1,
    /// tr(G^2 D^2)
    GGDD,
}

impl TraceSpec {
    pub const ALL: [TraceSpec; 15] = [
        TraceSpec::GGDD1,
        TraceSpec::GDDWb,
        TraceSpec::GDD1,
        TraceSpec::SDDWt,
        TraceSpec::WDDSt,
        TraceSpec::GDD,
        TraceSpec::SDDSt,
        TraceSpec::WbDDWb,
        TraceSpec::GDDWtW,
        TraceSpec::WbDD1G,
        TraceSpec::GGD1D1DD2,
        TraceSpec::WtWDD,
        TraceSpec::WbDD1,
        TraceSpec::GDD2D1D1,
        TraceSpec::GGDD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TraceSpec::GGDD1 => "tr(G^2 D D1)",
            TraceSpec::GDDWb => "tr(G D^2 Wb)",
            TraceSpec::GDD1 => "tr(G D D1)",
            TraceSpec::SDDWt => "tr(S D^2 W')",
            TraceSpec::WDDSt => "tr(W D^2 S')",
            TraceSpec::GDD => "tr(G D^2)",
            TraceSpec::SDDSt => "tr(S D^2 S')",
            TraceSpec::WbDDWb => "tr(Wb D^2 Wb)",
            TraceSpec::GDDWtW => "tr(G D^2 W'W)",
            TraceSpec::WbDD1G => "tr(Wb D D1 G)",
            TraceSpec::GGD1D1DD2 => "tr(G^2 (D1^2 + D D2))",
            TraceSpec::WtWDD => "tr(W'W D^2)",
            TraceSpec::WbDD1 => "tr(Wb D D1)",
            TraceSpec::GDD2D1D1 => "tr(G (D2 D + D1^2))",
            TraceSpec::GGDD => "tr(G^2 D^2)",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s || format!("{t:?}") == s)
            .ok_or_else(|| PsarError::UnknownSpec(s.to_string()))
    }
}

/// Sparse pieces of `S = I - rho W` needed by the trace kernels. Built in
/// O(nnz(W'W)); nothing here is N x N dense.
#[derive(Debug, Clone)]
pub struct SparseTraceCtx {
    pub rho: f64,
    pub w: CsrMatrix,
    pub wt: CsrMatrix,
    pub s: CsrMatrix,
    pub st: CsrMatrix,
    pub wtw: CsrMatrix,
    /// `G = S'S`
    pub g: CsrMatrix,
    /// `Wb = W'S + S'W = W + W' - 2 rho W'W`
    pub wb: CsrMatrix,
}

impl SparseTraceCtx {
    pub fn new(w: &WeightMatrix, rho: f64) -> Self {
        let wc = w.csr().clone();
        let wt = wc.transpose();
        let wtw = wt.matmul(&wc);
        Self::from_parts(wc, wt, wtw, rho)
    }

    /// Reuse `W`, `W'` and `W'W` across rho values.
    pub fn from_parts(w: CsrMatrix, wt: CsrMatrix, wtw: CsrMatrix, rho: f64) -> Self {
        let n = w.nrows();
        let eye = CsrMatrix::identity(n);
        let s = eye.add_scaled(1.0, &w, -rho);
        let st = eye.add_scaled(1.0, &wt, -rho);
        let w_plus_wt = w.add_scaled(1.0, &wt, 1.0);
        let g = eye.add_scaled(1.0, &w_plus_wt, -rho).add_scaled(1.0, &wtw, rho * rho);
        let wb = w_plus_wt.add_scaled(1.0, &wtw, -2.0 * rho);
        Self { rho, w, wt, s, st, wtw, g, wb }
    }
}

/// `sum_i b_i sum_j A_ij a_j B_ji` = tr(A diag(a) B diag(b)), in O(nnz).
/// `bt` is B transposed so that row i of `bt` lists B_ji.
fn trace_adbd(a: &CsrMatrix, da: &[f64], bt: &CsrMatrix, db: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..a.nrows() {
        let (ac, av) = a.row(i);
        let (bc, bv) = bt.row(i);
        let (mut p, mut q) = (0, 0);
        let mut row = 0.0;
        while p < ac.len() && q < bc.len() {
            match ac[p].cmp(&bc[q]) {
                std::cmp::Ordering::Less => p += 1,
                std::cmp::Ordering::Greater => q += 1,
                std::cmp::Ordering::Equal => {
                    row += av[p] * da[ac[p]] * bv[q];
                    p += 1;
                    q += 1;
                }
            }
        }
        total += db[i] * row;
    }
    total
}

/// `sum_i diag_i A_ii`
fn trace_ad(a: &CsrMatrix, diag: &[f64]) -> f64 {
    (0..a.nrows()).map(|i| a.get(i, i) * diag[i]).sum()
}

/// Evaluate one named trace exactly without forming any dense product.
pub fn sparse_trace_products(ctx: &SparseTraceCtx, d: &DRho, spec: TraceSpec) -> f64 {
    let n = d.diag.len();
    let ones = vec![1.0; n];
    let dd: Vec<f64> = d.diag.iter().map(|x| x * x).collect();
    let dd1: Vec<f64> = d.diag.iter().zip(&d.ddiag).map(|(a, b)| a * b).collect();
    let mix: Vec<f64> = (0..n).map(|i| d.ddiag[i] * d.ddiag[i] + d.diag[i] * d.dddiag[i]).collect();
    // G, Wb and W'W are symmetric, so they serve as their own transposes.
    match spec {
        TraceSpec::GGDD1 => trace_adbd(&ctx.g, &ones, &ctx.g, &dd1),
        TraceSpec::GDDWb => trace_adbd(&ctx.g, &dd, &ctx.wb, &ones),
        TraceSpec::GDD1 => trace_ad(&ctx.g, &dd1),
        TraceSpec::SDDWt => trace_adbd(&ctx.s, &dd, &ctx.w, &ones),
        TraceSpec::WDDSt => trace_adbd(&ctx.w, &dd, &ctx.s, &ones),
        TraceSpec::GDD => trace_ad(&ctx.g, &dd),
        TraceSpec::SDDSt => trace_adbd(&ctx.s, &dd, &ctx.s, &ones),
        TraceSpec::WbDDWb => trace_adbd(&ctx.wb, &dd, &ctx.wb, &ones),
        TraceSpec::GDDWtW => trace_adbd(&ctx.g, &dd, &ctx.wtw, &ones),
        TraceSpec::WbDD1G => trace_adbd(&ctx.wb, &dd1, &ctx.g, &ones),
        TraceSpec::GGD1D1DD2 => trace_adbd(&ctx.g, &ones, &ctx.g, &mix),
        TraceSpec::WtWDD => trace_ad(&ctx.wtw, &dd),
        TraceSpec::WbDD1 => trace_ad(&ctx.wb, &dd1),
        TraceSpec::GDD2D1D1 => trace_ad(&ctx.g, &mix),
        TraceSpec::GGDD => trace_adbd(&ctx.g, &ones, &ctx.g, &dd),
    }
}

/// Dense evaluation of the same expressions; used as a test oracle.
pub fn dense_trace_products(w: &WeightMatrix, d: &DRho, spec: TraceSpec) -> f64 {
    let n = w.n();
    let wd = w.to_dense();
    let s = Mat::<f64>::identity(n, n) - d.rho * &wd;
    let g = s.transpose() * &s;
    let wb = wd.transpose() * &s + s.transpose() * &wd;
    let diag = |v: &[f64]| Mat::from_fn(n, n, |i, j| if i == j { v[i] } else { 0.0 });
    let dm = diag(&d.diag);
    let d1 = diag(&d.ddiag);
    let d2 = diag(&d.dddiag);
    let m = match spec {
        TraceSpec::GGDD1 => &g * &g * &dm * &d1,
        TraceSpec::GDDWb => &g * &dm * &dm * &wb,
        TraceSpec::GDD1 => &g * &dm * &d1,
        TraceSpec::SDDWt => &s * &dm * &dm * wd.transpose(),
        TraceSpec::WDDSt => &wd * &dm * &dm * s.transpose(),
        TraceSpec::GDD => &g * &dm * &dm,
        TraceSpec::SDDSt => &s * &dm * &dm * s.transpose(),
        TraceSpec::WbDDWb => &wb * &dm * &dm * &wb,
        TraceSpec::GDDWtW => &g * &dm * &dm * wd.transpose() * &wd,
        TraceSpec::WbDD1G => &wb * &dm * &d1 * &g,
        TraceSpec::GGD1D1DD2 => &g * &g * (&d1 * &d1 + &dm * &d2),
        TraceSpec::WtWDD => wd.transpose() * &wd * &dm * &dm,
        TraceSpec::WbDD1 => &wb * &dm * &d1,
        TraceSpec::GDD2D1D1 => &g * (&d2 * &dm + &d1 * &d1),
        TraceSpec::GGDD => &g * &g * &dm * &dm,
    };
    (0..n).map(|i| m[(i, i)]).sum()
}
