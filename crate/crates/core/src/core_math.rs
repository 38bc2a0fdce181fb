//! Small dense linear algebra and spectral graph utilities.
//!
//! Everything here is sized for desk-scale experiments (dimensions and agent
//! counts in the tens), so matrices are dense and eigen-decompositions are
//! computed directly with a symmetric solver.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{self, domain};

/// Absolute slack allowed when checking PSD-ness.
pub const PSD_EIG_TOL: f64 = 1e-10;
/// Relative tolerance for symmetry checks.
pub const SYM_REL_TOL: f64 = 1e-12;
/// Row/column stochasticity tolerance for communication matrices.
pub const STOCHASTIC_TOL: f64 = 1e-10;
/// Condition numbers above this make a solve an error instead of garbage.
pub const COND_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum MathError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("matrix is not symmetric (max asymmetry {max_asym:.3e})")]
    NotSymmetric { max_asym: f64 },
    #[error("matrix is not positive semi-definite (min eigenvalue {min_eig:.3e})")]
    NotPsd { min_eig: f64 },
    #[error("quadratic form is negative ({value:.3e}) for a PSD matrix")]
    NegativeQuadraticForm { value: f64 },
    #[error("matrix is ill-conditioned (condition number {cond:.3e})")]
    IllConditioned { cond: f64 },
    #[error("graph is not connected")]
    Disconnected,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("laplacian scheme requires a regular graph (degrees {min_deg} and {max_deg} present)")]
    IrregularGraph { min_deg: usize, max_deg: usize },
    #[error("row {row} of the communication matrix sums to {sum} (must be 1)")]
    NotStochastic { row: usize, sum: f64 },
    #[error("a single node has no second eigenvalue")]
    SingleNode,
}

// ---------------------------------------------------------------------------
// PSD matrices
// ---------------------------------------------------------------------------

/// A validated real symmetric positive semi-definite matrix.
///
/// Construction checks symmetry to relative tolerance `SYM_REL_TOL` and that
/// all eigenvalues are at least `-PSD_EIG_TOL`; the stored matrix is
/// symmetrized exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMatrix {
    dim: usize,
    m: DMatrix<f64>,
}

impl PsdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, MathError> {
        if m.nrows() != m.ncols() {
            return Err(MathError::DimensionMismatch {
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        let scale = m.amax().max(1.0);
        let mut max_asym = 0.0f64;
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if max_asym > SYM_REL_TOL * scale {
            return Err(MathError::NotSymmetric { max_asym });
        }
        let sym = (&m + m.transpose()) * 0.5;
        let min_eig = SymmetricEigen::new(sym.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -PSD_EIG_TOL * scale {
            return Err(MathError::NotPsd { min_eig });
        }
        Ok(Self {
            dim: sym.nrows(),
            m: sym,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        Self {
            dim,
            m: DMatrix::identity(dim, dim) * c,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            m: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    /// xᵀ M x; clamps tiny negative round-off to zero.
    #[allow(clippy::needless_range_loop)]
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64, MathError> {
        if x.len() != self.dim {
            return Err(MathError::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let mut acc = 0.0;
        for i in 0..self.dim {
            let mut row = 0.0;
            for j in 0..self.dim {
                row += self.m[(i, j)] * x[j];
            }
            acc += x[i] * row;
        }
        if acc < -PSD_EIG_TOL {
            return Err(MathError::NegativeQuadraticForm { value: acc });
        }
        Ok(acc.max(0.0))
    }

    /// Smallest and largest eigenvalues.
    pub fn eigen_extremes(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.m.clone()).eigenvalues;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in eig.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Solves M x = b through a Cholesky factorization, refusing
    /// ill-conditioned systems.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, MathError> {
        if b.len() != self.dim {
            return Err(MathError::DimensionMismatch {
                expected: self.dim,
                actual: b.len(),
            });
        }
        let (lo, hi) = self.eigen_extremes();
        if lo <= 0.0 || hi / lo > COND_LIMIT {
            return Err(MathError::IllConditioned {
                cond: if lo > 0.0 { hi / lo } else { f64::INFINITY },
            });
        }
        let chol = Cholesky::new(self.m.clone()).ok_or(MathError::NotPsd { min_eig: lo })?;
        let x = chol.solve(&DVector::from_column_slice(b));
        Ok(x.as_slice().to_vec())
    }

    /// Explicit inverse via Cholesky, same conditioning guard as `solve`.
    pub fn inverse(&self) -> Result<PsdMatrix, MathError> {
        let (lo, hi) = self.eigen_extremes();
        if lo <= 0.0 || hi / lo > COND_LIMIT {
            return Err(MathError::IllConditioned {
                cond: if lo > 0.0 { hi / lo } else { f64::INFINITY },
            });
        }
        let chol = Cholesky::new(self.m.clone()).ok_or(MathError::NotPsd { min_eig: lo })?;
        let inv = chol.inverse();
        PsdMatrix::new(inv)
    }
}

impl Serialize for PsdMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.m[(i, j)]).collect())
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PsdMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        PsdMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

/// Weighted 2-norm ‖x‖_M = √(xᵀ M x).
pub fn weighted_norm(x: &[f64], m: &PsdMatrix) -> Result<f64, MathError> {
    Ok(m.quadratic_form(x)?.sqrt())
}

// ---------------------------------------------------------------------------
// Agent graphs
// ---------------------------------------------------------------------------

/// An undirected connected graph over the agents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    degrees: Vec<usize>,
    delta_max: usize,
    adjacency: Vec<Vec<usize>>,
}

impl AgentGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self, MathError> {
        if n == 0 {
            return Err(MathError::InvalidGraph("empty graph".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut norm_edges = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u == v {
                return Err(MathError::InvalidGraph(format!("self loop at node {u}")));
            }
            if u >= n || v >= n {
                return Err(MathError::InvalidGraph(format!(
                    "edge ({u}, {v}) outside node range 0..{n}"
                )));
            }
            let e = (u.min(v), u.max(v));
            if !seen.insert(e) {
                return Err(MathError::InvalidGraph(format!(
                    "duplicate edge ({}, {})",
                    e.0, e.1
                )));
            }
            norm_edges.push(e);
        }
        norm_edges.sort_unstable();
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in &norm_edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }
        let degrees: Vec<usize> = adjacency.iter().map(|a| a.len()).collect();
        let delta_max = degrees.iter().copied().max().unwrap_or(0);

        let g = Self {
            n,
            edges: norm_edges,
            degrees,
            delta_max,
            adjacency,
        };
        if !g.is_connected() {
            return Err(MathError::Disconnected);
        }
        Ok(g)
    }

    fn is_connected(&self) -> bool {
        if self.n == 1 {
            return true;
        }
        let mut visited = vec![false; self.n];
        let mut stack = vec![0usize];
        visited[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &self.adjacency[u] {
                if !visited[v] {
                    visited[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.n
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn delta_max(&self) -> usize {
        self.delta_max
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn is_regular(&self) -> bool {
        self.degrees.windows(2).all(|w| w[0] == w[1])
    }

    pub fn complete(n: usize) -> Result<Self, MathError> {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                edges.push((u, v));
            }
        }
        Self::new(n, edges)
    }

    pub fn cycle(n: usize) -> Result<Self, MathError> {
        if n < 3 {
            return Err(MathError::InvalidGraph(
                "cycle needs at least 3 nodes".into(),
            ));
        }
        let edges = (0..n).map(|u| (u, (u + 1) % n)).collect();
        Self::new(n, edges)
    }

    pub fn path(n: usize) -> Result<Self, MathError> {
        if n < 2 {
            return Err(MathError::InvalidGraph(
                "path needs at least 2 nodes".into(),
            ));
        }
        let edges = (0..n - 1).map(|u| (u, u + 1)).collect();
        Self::new(n, edges)
    }

    pub fn star(n: usize) -> Result<Self, MathError> {
        if n < 2 {
            return Err(MathError::InvalidGraph(
                "star needs at least 2 nodes".into(),
            ));
        }
        let edges = (1..n).map(|v| (0, v)).collect();
        Self::new(n, edges)
    }

    /// One Erdős–Rényi draw; errors if the sample is disconnected.
    pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Self, MathError> {
        let mut rng = stream::substream(&[seed, domain::GRAPH]);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        Self::new(n, edges)
    }

    /// Retries Erdős–Rényi draws with derived seeds until connected.
    pub fn random_connected(n: usize, p: f64, seed: u64) -> Result<Self, MathError> {
        for attempt in 0..1000u64 {
            match Self::erdos_renyi(n, p, seed.wrapping_add(attempt.wrapping_mul(0x9E37))) {
                Ok(g) => return Ok(g),
                Err(MathError::Disconnected) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(MathError::Disconnected)
    }

    /// Parses edge-list text: one `u v` pair per line, 0-indexed. Blank lines
    /// and lines starting with `#` are skipped; node count is max index + 1.
    pub fn parse_edge_list(text: &str) -> Result<Self, MathError> {
        let mut edges = Vec::new();
        let mut max_node = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize, MathError> {
                tok.and_then(|t| t.parse::<usize>().ok()).ok_or_else(|| {
                    MathError::InvalidGraph(format!("bad edge on line {}", lineno + 1))
                })
            };
            let u = parse(it.next())?;
            let v = parse(it.next())?;
            if it.next().is_some() {
                return Err(MathError::InvalidGraph(format!(
                    "trailing tokens on line {}",
                    lineno + 1
                )));
            }
            max_node = max_node.max(u).max(v);
            edges.push((u, v));
        }
        if edges.is_empty() {
            return Err(MathError::InvalidGraph("no edges".into()));
        }
        Self::new(max_node + 1, edges)
    }

    pub fn to_edge_list_text(&self) -> String {
        let mut out = String::new();
        for &(u, v) in &self.edges {
            out.push_str(&format!("{u} {v}\n"));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Communication matrices
// ---------------------------------------------------------------------------

/// How to turn a graph into a doubly stochastic communication matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// P = I − (1/(δ_max+1)) D^{-1/2} L D^{-1/2}. Doubly stochastic only on
    /// regular graphs, so irregular inputs are rejected.
    Laplacian,
    /// Metropolis weights P_ij = 1/(2 max(d_i, d_j)) on edges, residual mass
    /// on the diagonal. Doubly stochastic on any graph.
    Metropolis,
}

/// A symmetric doubly stochastic matrix respecting a graph's edge pattern,
/// with all eigenvalues real in [-1, 1] and |λ₂| < 1 when connected.
#[derive(Debug, Clone)]
pub struct CommMatrix {
    n: usize,
    m: DMatrix<f64>,
    lambda2_abs: f64,
    degrees: Vec<usize>,
    edge_count: usize,
}

impl CommMatrix {
    /// Validates an arbitrary matrix against the graph's zero pattern and the
    /// stochasticity/spectral requirements.
    pub fn from_matrix(m: DMatrix<f64>, g: &AgentGraph) -> Result<Self, MathError> {
        let n = g.n();
        if m.nrows() != n || m.ncols() != n {
            return Err(MathError::DimensionMismatch {
                expected: n,
                actual: m.nrows(),
            });
        }
        let mut max_asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if max_asym > SYM_REL_TOL * m.amax().max(1.0) {
            return Err(MathError::NotSymmetric { max_asym });
        }
        for i in 0..n {
            let sum: f64 = (0..n).map(|j| m[(i, j)]).sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(MathError::NotStochastic { row: i, sum });
            }
        }
        let mut adj = vec![vec![false; n]; n];
        for &(u, v) in g.edges() {
            adj[u][v] = true;
            adj[v][u] = true;
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && !adj[i][j] && m[(i, j)].abs() > STOCHASTIC_TOL {
                    return Err(MathError::InvalidGraph(format!(
                        "nonzero weight on missing edge ({i}, {j})"
                    )));
                }
            }
        }
        let sym = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone()).eigenvalues;
        let mut mods: Vec<f64> = eig.iter().map(|v| v.abs()).collect();
        mods.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if mods[0] > 1.0 + STOCHASTIC_TOL {
            return Err(MathError::NotStochastic {
                row: 0,
                sum: mods[0],
            });
        }
        let lambda2_abs = if n >= 2 {
            let l2 = mods[1];
            if l2 < 1e-12 {
                0.0
            } else {
                l2
            }
        } else {
            0.0
        };
        if n >= 2 && lambda2_abs >= 1.0 - STOCHASTIC_TOL {
            return Err(MathError::Disconnected);
        }
        Ok(Self {
            n,
            m: sym,
            lambda2_abs,
            degrees: g.degrees().to_vec(),
            edge_count: g.edges().len(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn lambda2_abs(&self) -> f64 {
        self.lambda2_abs
    }

    /// Node degrees of the underlying graph.
    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Undirected edge count of the underlying graph.
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// P v, respecting the graph locally (each entry mixes only neighbors).
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.m * v
    }

    pub fn apply_matrix(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        &self.m * v
    }
}

/// Builds the communication matrix for a graph under the chosen scheme.
pub fn build_communication_matrix(g: &AgentGraph, scheme: Scheme) -> Result<CommMatrix, MathError> {
    let n = g.n();
    if n < 2 {
        return Err(MathError::SingleNode);
    }
    let m = match scheme {
        Scheme::Laplacian => {
            if !g.is_regular() {
                let min_deg = *g.degrees().iter().min().unwrap();
                return Err(MathError::IrregularGraph {
                    min_deg,
                    max_deg: g.delta_max(),
                });
            }
            let dmax = g.delta_max() as f64;
            let mut m = DMatrix::identity(n, n);
            // D^{-1/2} L D^{-1/2} with L = D - A; on a regular graph this is
            // I - A/δ.
            for i in 0..n {
                let di = g.degrees()[i] as f64;
                m[(i, i)] -= 1.0 / (dmax + 1.0); // (D^{-1/2} L D^{-1/2})_ii = 1
                for &j in g.neighbors(i) {
                    let dj = g.degrees()[j] as f64;
                    m[(i, j)] += 1.0 / ((dmax + 1.0) * (di * dj).sqrt());
                }
            }
            m
        }
        Scheme::Metropolis => {
            let mut m = DMatrix::zeros(n, n);
            for &(u, v) in g.edges() {
                let w = 1.0 / (2.0 * g.degrees()[u].max(g.degrees()[v]) as f64);
                m[(u, v)] = w;
                m[(v, u)] = w;
            }
            for i in 0..n {
                let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)]).sum();
                m[(i, i)] = 1.0 - off;
            }
            m
        }
    };
    CommMatrix::from_matrix(m, g)
}

/// Modulus of the second-largest-magnitude eigenvalue.
///
/// A value of exactly 0 is returned when |λ₂| falls below 1e-12; downstream
/// Chebyshev recursions must reject it (the weights divide by |λ₂|).
pub fn second_eigenvalue_modulus(p: &CommMatrix) -> Result<f64, MathError> {
    if p.n() < 2 {
        return Err(MathError::SingleNode);
    }
    Ok(p.lambda2_abs())
}

// ---------------------------------------------------------------------------
// Incrementally maintained inverse of λI + Σ x xᵀ
// ---------------------------------------------------------------------------

/// Ridge design matrix with a Sherman–Morrison-maintained inverse and running
/// log-determinant.
#[derive(Debug, Clone)]
pub struct RankOneInverse {
    dim: usize,
    v: DMatrix<f64>,
    v_inv: DMatrix<f64>,
    log_det: f64,
}

impl RankOneInverse {
    pub fn new(dim: usize, lambda: f64) -> Self {
        assert!(lambda > 0.0, "ridge regularizer must be positive");
        Self {
            dim,
            v: DMatrix::identity(dim, dim) * lambda,
            v_inv: DMatrix::identity(dim, dim) / lambda,
            log_det: (dim as f64) * lambda.ln(),
        }
    }

    /// Re-seeds the maintained state from an explicit SPD matrix.
    pub fn from_matrix(v: DMatrix<f64>) -> Result<Self, MathError> {
        let dim = v.nrows();
        let psd = PsdMatrix::new(v.clone())?;
        let v_inv = psd.inverse()?.matrix().clone();
        let chol = Cholesky::new(v.clone()).ok_or(MathError::NotPsd { min_eig: 0.0 })?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|x| x.ln())
                .sum::<f64>();
        Ok(Self {
            dim,
            v,
            v_inv,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// V ← V + x xᵀ.
    pub fn update(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        let xv = DVector::from_column_slice(x);
        let vinv_x = &self.v_inv * &xv;
        let denom = 1.0 + xv.dot(&vinv_x);
        self.log_det += denom.ln();
        self.v += &xv * xv.transpose();
        let outer = &vinv_x * vinv_x.transpose();
        self.v_inv -= outer / denom;
    }

    /// xᵀ V⁻¹ x using the maintained inverse.
    pub fn quadratic_form_inv(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        xv.dot(&(&self.v_inv * &xv)).max(0.0)
    }

    /// Solves V θ = b by fresh factorization with a conditioning guard; the
    /// maintained inverse is only trusted for cheap quadratic forms.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, MathError> {
        PsdMatrix::new(self.v.clone())?.solve(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(i: usize, d: usize) -> Vec<f64> {
        let mut x = vec![0.0; d];
        x[i] = 1.0;
        x
    }

    #[test]
    fn weighted_norm_identity_case() {
        let m = PsdMatrix::identity(3);
        assert!((weighted_norm(&unit(0, 3), &m).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_norm_zero_vector() {
        let m = PsdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        assert_eq!(weighted_norm(&[0.0, 0.0], &m).unwrap(), 0.0);
    }

    #[test]
    fn weighted_norm_diagonal() {
        let m = PsdMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0])).unwrap();
        assert!((weighted_norm(&unit(0, 2), &m).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_norm_dimension_mismatch() {
        let m = PsdMatrix::identity(3);
        assert!(matches!(
            weighted_norm(&[1.0, 0.0], &m),
            Err(MathError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn psd_rejects_asymmetric_and_indefinite() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(matches!(
            PsdMatrix::new(asym),
            Err(MathError::NotSymmetric { .. })
        ));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            PsdMatrix::new(indef),
            Err(MathError::NotPsd { .. })
        ));
    }

    #[test]
    fn comm_matrix_complete2_laplacian() {
        let g = AgentGraph::complete(2).unwrap();
        let p = build_communication_matrix(&g, Scheme::Laplacian).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((p.matrix()[(i, j)] - 0.5).abs() < 1e-14);
            }
        }
        assert!(second_eigenvalue_modulus(&p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn comm_matrix_cycle4_laplacian() {
        let g = AgentGraph::cycle(4).unwrap();
        let p = build_communication_matrix(&g, Scheme::Laplacian).unwrap();
        // (2/3) I + A/6
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j {
                    2.0 / 3.0
                } else if (i + 1) % 4 == j || (j + 1) % 4 == i {
                    1.0 / 6.0
                } else {
                    0.0
                };
                assert!(
                    (p.matrix()[(i, j)] - expect).abs() < 1e-14,
                    "entry ({i},{j})"
                );
            }
        }
        assert!((second_eigenvalue_modulus(&p).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let eig = SymmetricEigen::new(p.matrix().clone()).eigenvalues;
        let mut vals: Vec<f64> = eig.iter().cloned().collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let expect = [1.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
        for (v, e) in vals.iter().zip(expect.iter()) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn comm_matrix_path3_metropolis() {
        let g = AgentGraph::path(3).unwrap();
        let p = build_communication_matrix(&g, Scheme::Metropolis).unwrap();
        let expect = [[0.75, 0.25, 0.0], [0.25, 0.5, 0.25], [0.0, 0.25, 0.75]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((p.matrix()[(i, j)] - expect[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn laplacian_rejects_irregular() {
        let g = AgentGraph::star(4).unwrap();
        assert!(matches!(
            build_communication_matrix(&g, Scheme::Laplacian),
            Err(MathError::IrregularGraph { .. })
        ));
    }

    #[test]
    fn second_eigenvalue_examples() {
        let g = AgentGraph::complete(2).unwrap();
        let lazy =
            CommMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75]), &g)
                .unwrap();
        assert!((second_eigenvalue_modulus(&lazy).unwrap() - 0.5).abs() < 1e-12);

        let g1 = AgentGraph::new(1, vec![]).unwrap();
        let single = CommMatrix::from_matrix(DMatrix::from_row_slice(1, 1, &[1.0]), &g1).unwrap();
        assert!(matches!(
            second_eigenvalue_modulus(&single),
            Err(MathError::SingleNode)
        ));
    }

    #[test]
    fn doubly_stochastic_on_regular_graphs() {
        for (g, scheme) in [
            (AgentGraph::cycle(6).unwrap(), Scheme::Laplacian),
            (AgentGraph::cycle(6).unwrap(), Scheme::Metropolis),
            (AgentGraph::complete(5).unwrap(), Scheme::Laplacian),
            (AgentGraph::complete(5).unwrap(), Scheme::Metropolis),
        ] {
            let p = build_communication_matrix(&g, scheme).unwrap();
            let n = g.n();
            let ones = DVector::from_element(n, 1.0);
            let out = p.apply(&ones);
            for i in 0..n {
                assert!((out[i] - 1.0).abs() < 1e-10);
            }
            for j in 0..n {
                let col: f64 = (0..n).map(|i| p.matrix()[(i, j)]).sum();
                assert!((col - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn metropolis_handles_irregular_graphs() {
        let g = AgentGraph::random_connected(9, 0.35, 42).unwrap();
        let p = build_communication_matrix(&g, Scheme::Metropolis).unwrap();
        assert!(p.lambda2_abs() < 1.0);
        for i in 0..g.n() {
            let sum: f64 = (0..g.n()).map(|j| p.matrix()[(i, j)]).sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn edge_list_round_trip() {
        let g = AgentGraph::cycle(5).unwrap();
        let text = g.to_edge_list_text();
        let g2 = AgentGraph::parse_edge_list(&text).unwrap();
        assert_eq!(g.edges(), g2.edges());
        assert!(AgentGraph::parse_edge_list("0 0\n").is_err());
        assert!(AgentGraph::parse_edge_list("0 1\n0 1\n").is_err());
    }

    #[test]
    fn disconnected_graph_rejected() {
        assert!(matches!(
            AgentGraph::new(4, vec![(0, 1), (2, 3)]),
            Err(MathError::Disconnected)
        ));
    }

    #[test]
    fn rank_one_update_matches_fresh_solve() {
        let d = 5;
        let mut inc = RankOneInverse::new(d, 0.7);
        let mut rng = crate::stream::substream(&[99, 1]);
        let b: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        for step in 0..1000 {
            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
            inc.update(&x);
            if step % 100 == 99 {
                let fresh = PsdMatrix::new(inc.matrix().clone()).unwrap();
                let direct = fresh.solve(&b).unwrap();
                let via_inv: Vec<f64> = {
                    let bv = DVector::from_column_slice(&b);
                    (inc.v_inv.clone() * bv).as_slice().to_vec()
                };
                for (a, c) in direct.iter().zip(via_inv.iter()) {
                    let scale = a.abs().max(1e-12);
                    assert!(
                        (a - c).abs() / scale < 1e-8,
                        "incremental inverse drifted at step {step}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn weighted_norm_bilinearity(seed in 0u64..500) {
            let d = 4usize;
            let mut rng = crate::stream::substream(&[seed, 7]);
            let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
            let m = PsdMatrix::new(&a * a.transpose()).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let qx = m.quadratic_form(&x).unwrap();
            let qy = m.quadratic_form(&y).unwrap();
            let qxy = m.quadratic_form(&xy).unwrap();
            let mut cross = 0.0;
            for i in 0..d {
                for j in 0..d {
                    cross += x[i] * m.matrix()[(i, j)] * y[j];
                }
            }
            prop_assert!((qx + qy + 2.0 * cross - qxy).abs() < 1e-9);
        }
    }
}
