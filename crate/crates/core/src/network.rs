//! Adjacency structures, row normalization and the three random network
//! generators used in the simulation studies (dyad-independence, stochastic
//! block, power-law in-degree).

use std::io::{Read, Write};

use rand::seq::index;
use rand::Rng;

use crate::error::{PsarError, Result};
use crate::rng::{rng_from_seed, PsarRng};
use crate::spmat::CsrMatrix;

/// Directed 0/1 adjacency over `n` nodes, stored as sorted out-neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    rows: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self { n, rows: vec![Vec::new(); n] }
    }

    /// Build from directed edges `i -> j`. Self-loops are rejected and
    /// repeated edges collapse to a single 1.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(PsarError::Dimension(format!("edge ({i}, {j}) outside 0..{n}")));
            }
            if i == j {
                return Err(PsarError::Config(format!("self-loop at node {i}")));
            }
            rows[i].push(j);
        }
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        Ok(Self { n, rows })
    }

    /// Build from a dense 0/1 matrix given row by row.
    pub fn from_dense(a: &[Vec<u8>]) -> Result<Self> {
        let n = a.len();
        let mut edges = Vec::new();
        for (i, row) in a.iter().enumerate() {
            if row.len() != n {
                return Err(PsarError::Dimension("adjacency must be square".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => edges.push((i, j)),
                    _ => return Err(PsarError::Config(format!("entry ({i}, {j}) is not 0/1"))),
                }
            }
        }
        Self::from_edges(n, edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.rows[i].len()
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for r in &self.rows {
            for &j in r {
                deg[j] += 1;
            }
        }
        deg
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    /// `sum a_ij / (n (n - 1))`.
    pub fn density(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.edge_count() as f64 / (self.n as f64 * (self.n as f64 - 1.0))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().enumerate().flat_map(|(i, r)| r.iter().map(move |&j| (i, j)))
    }

    /// Toggle entry `(i, j)`; returns the new value.
    pub fn flip(&mut self, i: usize, j: usize) -> bool {
        assert!(i != j && i < self.n && j < self.n);
        match self.rows[i].binary_search(&j) {
            Ok(k) => {
                self.rows[i].remove(k);
                false
            }
            Err(k) => {
                self.rows[i].insert(k, j);
                true
            }
        }
    }

    pub fn zero_out_degree_nodes(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.rows[i].is_empty()).collect()
    }

    /// Repeatedly remove nodes with no out-edges (removing a node can strand
    /// the nodes that only pointed at it) and re-index the survivors.
    pub fn drop_zero_out_degree(&self) -> DropOutcome {
        let mut alive = vec![true; self.n];
        let mut deg: Vec<usize> = self.rows.iter().map(Vec::len).collect();
        let mut in_lists = vec![Vec::new(); self.n];
        for (i, j) in self.edges() {
            in_lists[j].push(i);
        }
        let mut stack: Vec<usize> = (0..self.n).filter(|&i| deg[i] == 0).collect();
        while let Some(v) = stack.pop() {
            if !alive[v] {
                continue;
            }
            alive[v] = false;
            for &u in &in_lists[v] {
                if alive[u] {
                    deg[u] -= 1;
                    if deg[u] == 0 {
                        stack.push(u);
                    }
                }
            }
        }
        let kept: Vec<usize> = (0..self.n).filter(|&i| alive[i]).collect();
        let mut new_id = vec![usize::MAX; self.n];
        for (k, &i) in kept.iter().enumerate() {
            new_id[i] = k;
        }
        let rows = kept
            .iter()
            .map(|&i| {
                self.rows[i].iter().filter(|&&j| alive[j]).map(|&j| new_id[j]).collect::<Vec<_>>()
            })
            .collect();
        let dropped = self.n - kept.len();
        DropOutcome { adjacency: Adjacency { n: kept.len(), rows }, kept, dropped }
    }

    pub fn write_edge_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["src", "dst"])?;
        for (i, j) in self.edges() {
            wtr.write_record([i.to_string(), j.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read a `src,dst` edge list. Node count defaults to the largest id + 1.
    pub fn read_edge_csv<R: Read>(input: R, n: Option<usize>) -> Result<Self> {
        let edges = read_edge_list(input)?;
        let n = n.unwrap_or_else(|| edges.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0));
        Self::from_edges(n, edges)
    }
}

/// Raw `(src, dst)` pairs of a `src,dst` edge file.
pub fn read_edge_list<R: Read>(input: R) -> Result<Vec<(usize, usize)>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "src" || &headers[1] != "dst" {
        return Err(PsarError::Parse("edge list header must be `src,dst`".into()));
    }
    let mut edges = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<usize> {
            rec.get(k)
                .unwrap_or("")
                .trim()
                .parse::<usize>()
                .map_err(|e| PsarError::Parse(format!("edge row {}: {e}", line + 2)))
        };
        edges.push((parse(0)?, parse(1)?));
    }
    Ok(edges)
}

/// Result of [`Adjacency::drop_zero_out_degree`]: the re-indexed network and
/// the original ids of the surviving nodes.
#[derive(Debug, Clone)]
pub struct DropOutcome {
    pub adjacency: Adjacency,
    pub kept: Vec<usize>,
    pub dropped: usize,
}

/// Row-normalized weighting matrix `w_ij = a_ij / d_i`.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    w: CsrMatrix,
}

impl WeightMatrix {
    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn csr(&self) -> &CsrMatrix {
        &self.w
    }

    pub fn nnz(&self) -> usize {
        self.w.nnz()
    }

    /// Wrap an arbitrary square sparse matrix after checking the weighting
    /// matrix invariants (nonnegative, zero diagonal, unit row sums).
    pub fn from_csr(w: CsrMatrix) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(PsarError::Dimension("weight matrix must be square".into()));
        }
        for i in 0..w.nrows() {
            let (cols, vals) = w.row(i);
            if cols.is_empty() {
                return Err(PsarError::ZeroOutDegree(i));
            }
            if cols.binary_search(&i).is_ok() {
                return Err(PsarError::Config(format!("nonzero diagonal at row {i}")));
            }
            if vals.iter().any(|&v| v < 0.0) {
                return Err(PsarError::Config(format!("negative weight in row {i}")));
            }
            let s: f64 = vals.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(PsarError::Config(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { w })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.w.row(i).1.iter().sum()).collect()
    }

    pub fn to_dense(&self) -> faer::Mat<f64> {
        self.w.to_dense()
    }
}

/// Divide each row of `a` by its out-degree.
pub fn row_normalize(a: &Adjacency) -> Result<WeightMatrix> {
    let n = a.n();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(a.edge_count());
    let mut values = Vec::with_capacity(a.edge_count());
    indptr.push(0);
    for i in 0..n {
        let r = a.neighbors(i);
        if r.is_empty() {
            return Err(PsarError::ZeroOutDegree(i));
        }
        let inv = 1.0 / r.len() as f64;
        indices.extend_from_slice(r);
        values.extend(std::iter::repeat_n(inv, r.len()));
        indptr.push(indices.len());
    }
    Ok(WeightMatrix { w: CsrMatrix::from_raw(n, n, indptr, indices, values) })
}

/// Network ready for estimation: zero-out-degree nodes removed, rows
/// normalized. `kept[k]` is the generator id of node `k`.
#[derive(Debug, Clone)]
pub struct PreparedNetwork {
    pub adjacency: Adjacency,
    pub weights: WeightMatrix,
    pub kept: Vec<usize>,
    pub dropped: usize,
}

pub fn prepare(a: &Adjacency) -> Result<PreparedNetwork> {
    let out = a.drop_zero_out_degree();
    if out.adjacency.n() == 0 {
        return Err(PsarError::Config("every node has zero out-degree".into()));
    }
    let weights = row_normalize(&out.adjacency)?;
    Ok(PreparedNetwork { adjacency: out.adjacency, weights, kept: out.kept, dropped: out.dropped })
}

/// Dyad probabilities of the dyad-independence model:
/// `(P(mutual), P(one direction))`.
pub fn dyad_probabilities(n: usize) -> (f64, f64) {
    let nf = n as f64;
    (10.0 / nf, 0.5 * nf.powf(-0.8))
}

/// Dyad-independence network: each unordered pair is mutual with probability
/// `10/n` and one-directional (each way) with probability `0.5 n^-0.8`.
pub fn gen_dyad(n: usize, seed: u64) -> Result<Adjacency> {
    let (p_mutual, p_single) = dyad_probabilities(n);
    let total = p_mutual + 2.0 * p_single;
    if total > 1.0 {
        return Err(PsarError::ProbabilityOverflow { n, total });
    }
    let mut rng = rng_from_seed(seed);
    let mut rows = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let u: f64 = rng.random();
            if u < p_mutual {
                rows[i].push(j);
                rows[j].push(i);
            } else if u < p_mutual + p_single {
                rows[i].push(j);
            } else if u < total {
                rows[j].push(i);
            }
        }
    }
    for r in &mut rows {
        r.sort_unstable();
    }
    Ok(Adjacency { n, rows })
}

/// Stochastic block network with uniform labels over `k_blocks` blocks.
/// Returns the adjacency and the block label of every node.
pub fn gen_sbm_labeled(n: usize, k_blocks: usize, seed: u64) -> Result<(Adjacency, Vec<usize>)> {
    if k_blocks == 0 {
        return Err(PsarError::Config("k_blocks must be positive".into()));
    }
    let (p_in, p_out) = sbm_probabilities(n);
    if p_in > 1.0 {
        return Err(PsarError::ProbabilityOverflow { n, total: p_in });
    }
    let mut rng = rng_from_seed(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k_blocks)).collect();
    let mut rows = vec![Vec::new(); n];
    for (i, row) in rows.iter_mut().enumerate() {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                row.push(j);
            }
        }
    }
    Ok((Adjacency { n, rows }, labels))
}

pub fn gen_sbm(n: usize, k_blocks: usize, seed: u64) -> Result<Adjacency> {
    gen_sbm_labeled(n, k_blocks, seed).map(|(a, _)| a)
}

/// `(within-block, cross-block)` edge probabilities.
pub fn sbm_probabilities(n: usize) -> (f64, f64) {
    (20.0 / n as f64, 2.0 / n as f64)
}

/// Truncated discrete power law `P(m = k) = c k^-alpha`, `k = 1..=kmax`.
#[derive(Debug, Clone)]
pub struct PowerLaw {
    cdf: Vec<f64>,
}

impl PowerLaw {
    pub fn new(alpha: f64, kmax: usize) -> Self {
        assert!(kmax >= 1);
        let weights: Vec<f64> = if alpha.is_infinite() {
            (1..=kmax).map(|k| if k == 1 { 1.0 } else { 0.0 }).collect()
        } else {
            (1..=kmax).map(|k| (k as f64).powf(-alpha)).collect()
        };
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Self { cdf }
    }

    pub fn pmf(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            1 => self.cdf[0],
            k if k <= self.cdf.len() => self.cdf[k - 1] - self.cdf[k - 2],
            _ => 0.0,
        }
    }

    pub fn sample(&self, rng: &mut PsarRng) -> usize {
        let u: f64 = rng.random();
        let k = self.cdf.partition_point(|&c| c < u);
        k.min(self.cdf.len() - 1) + 1
    }
}

/// Power-law network: node `i` draws an in-degree `m_i` from the truncated
/// power law on `1..=n-1` and receives edges from `m_i` distinct followers.
pub fn gen_powerlaw(n: usize, alpha: f64, seed: u64) -> Result<Adjacency> {
    if n < 2 {
        return Err(PsarError::Config("power-law network needs n >= 2".into()));
    }
    if !(alpha > 2.0) {
        return Err(PsarError::Config(format!("power-law exponent {alpha} must exceed 2")));
    }
    let law = PowerLaw::new(alpha, n - 1);
    let mut rng = rng_from_seed(seed);
    let mut rows = vec![Vec::new(); n];
    for i in 0..n {
        let m = law.sample(&mut rng);
        for idx in index::sample(&mut rng, n - 1, m) {
            let j = if idx >= i { idx + 1 } else { idx };
            rows[j].push(i);
        }
    }
    for r in &mut rows {
        r.sort_unstable();
    }
    Ok(Adjacency { n, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_normalize_small() {
        let a = Adjacency::from_dense(&[vec![0, 1, 1], vec![1, 0, 0], vec![0, 1, 0]]).unwrap();
        let w = row_normalize(&a).unwrap().to_dense();
        let want = [[0.0, 0.5, 0.5], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w[(i, j)], want[i][j]);
            }
        }
    }

    #[test]
    fn row_normalize_rejects_zero_out_degree() {
        let a = Adjacency::from_dense(&[vec![0, 1, 1], vec![1, 0, 0], vec![0, 0, 0]]).unwrap();
        assert!(matches!(row_normalize(&a), Err(PsarError::ZeroOutDegree(2))));
    }

    #[test]
    fn dyad_overflow() {
        assert!(matches!(gen_dyad(5, 1), Err(PsarError::ProbabilityOverflow { .. })));
        assert!(gen_dyad(20, 1).is_ok());
    }

    #[test]
    fn sbm_overflow() {
        assert!(matches!(gen_sbm(10, 2, 1), Err(PsarError::ProbabilityOverflow { .. })));
    }

    #[test]
    fn drop_cascades() {
        // 0 -> 1 -> 2, 2 has no out-edges; dropping 2 strands 1, then 0.
        let a = Adjacency::from_edges(4, [(0, 1), (1, 2), (3, 0)]).unwrap();
        let out = a.drop_zero_out_degree();
        assert_eq!(out.dropped, 4);
        let b = Adjacency::from_edges(4, [(0, 1), (1, 0), (2, 3), (3, 1)]).unwrap();
        let out = b.drop_zero_out_degree();
        assert_eq!(out.dropped, 0);
        let c = Adjacency::from_edges(4, [(0, 1), (1, 0), (2, 3), (3, 0), (2, 0)]).unwrap();
        let c = c.drop_zero_out_degree();
        assert_eq!(c.dropped, 0);
    }

    #[test]
    fn drop_reindexes() {
        let a = Adjacency::from_edges(4, [(0, 2), (2, 0), (3, 2), (1, 1 + 2)]).unwrap();
        // node 1 -> 3 -> 2; nobody is stranded.
        assert_eq!(a.drop_zero_out_degree().dropped, 0);
        let b = Adjacency::from_edges(4, [(0, 2), (2, 0), (3, 2)]).unwrap();
        let out = b.drop_zero_out_degree();
        assert_eq!(out.kept, vec![0, 2, 3]);
        assert!(out.adjacency.has_edge(2, 1));
        assert!(out.adjacency.has_edge(0, 1));
    }

    #[test]
    fn edge_csv_round_trip() {
        let a = gen_dyad(60, 3).unwrap();
        let mut buf = Vec::new();
        a.write_edge_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"src,dst\n"));
        let b = Adjacency::read_edge_csv(buf.as_slice(), Some(60)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn powerlaw_infinite_alpha_gives_single_follower() {
        let a = gen_powerlaw(50, f64::INFINITY, 9).unwrap();
        assert!(a.in_degrees().iter().all(|&d| d == 1));
    }

    #[test]
    fn flip_is_an_involution() {
        let mut a = gen_dyad(30, 4).unwrap();
        let before = a.clone();
        let v = a.flip(3, 7);
        assert_eq!(v, !before.has_edge(3, 7));
        a.flip(3, 7);
        assert_eq!(a, before);
    }
}
