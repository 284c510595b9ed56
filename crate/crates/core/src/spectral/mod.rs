//! Symmetric normalized Laplacian and Fiedler-pair extraction.
//!
//! `L = I − D^{-1/2} W D^{-1/2}` is stored through its normalized adjacency
//! `N = D^{-1/2} W D^{-1/2}`, dense or compressed-row, and applied as
//! `x − N x` with fixed-order row sums so dense and sparse storage of the same
//! graph produce identical products.

mod jacobi;
mod lobpcg;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::{AnchoredGraph, FeatureGraph};
use crate::error::{Error, Result};

pub use lobpcg::{lobpcg, LobpcgOutput};

/// Largest operator the dense eigendecomposition accepts.
pub const DENSE_LIMIT: usize = 4096;

/// Rows per parallel task in operator products.
const ROW_BLOCK: usize = 64;

#[derive(Debug, Clone)]
enum Adjacency {
    /// Row-major `size × size`.
    Dense(Vec<f64>),
    Sparse {
        offsets: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct Laplacian {
    size: usize,
    degrees: Vec<f64>,
    adjacency: Adjacency,
}

fn inv_sqrt_degrees(degrees: &[f64]) -> Result<Vec<f64>> {
    degrees
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d > 0.0 && d.is_finite() {
                Ok(1.0 / d.sqrt())
            } else {
                Err(Error::IsolatedVertex(i))
            }
        })
        .collect()
}

impl Laplacian {
    /// Builds the Laplacian of an arbitrary symmetric nonnegative weight matrix.
    pub fn from_weights(w: &DMatrix<f64>) -> Result<Self> {
        let size = w.nrows();
        if w.ncols() != size {
            return Err(Error::DimensionMismatch {
                expected: "square weight matrix".into(),
                actual: format!("{}x{}", size, w.ncols()),
            });
        }
        for i in 0..size {
            for j in 0..i {
                if !(w[(i, j)] >= 0.0) || w[(i, j)] != w[(j, i)] {
                    return Err(Error::invalid(format!(
                        "weight ({i}, {j}) is negative or asymmetric"
                    )));
                }
            }
        }
        let degrees: Vec<f64> = (0..size).map(|i| w.row(i).iter().sum()).collect();
        let s = inv_sqrt_degrees(&degrees)?;
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                data[i * size + j] = w[(i, j)] * (s[i] * s[j]);
            }
        }
        Ok(Laplacian {
            size,
            degrees,
            adjacency: Adjacency::Dense(data),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Weighted degrees `D = W·1`.
    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.adjacency, Adjacency::Sparse { .. })
    }

    /// `diag(L)`; equal to one wherever the graph has no self-loops.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size)
            .map(|i| match &self.adjacency {
                Adjacency::Dense(d) => 1.0 - d[i * self.size + i],
                Adjacency::Sparse { offsets, cols, vals } => {
                    let (a, b) = (offsets[i], offsets[i + 1]);
                    1.0 - cols[a..b].binary_search(&i).map_or(0.0, |k| vals[a + k])
                }
            })
            .collect()
    }

    #[inline]
    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        match &self.adjacency {
            Adjacency::Dense(d) => {
                let row = &d[i * self.size..(i + 1) * self.size];
                let mut s = 0.0;
                for (a, b) in row.iter().zip(x) {
                    if *a != 0.0 {
                        s += a * b;
                    }
                }
                s
            }
            Adjacency::Sparse { offsets, cols, vals } => {
                let mut s = 0.0;
                for k in offsets[i]..offsets[i + 1] {
                    if vals[k] != 0.0 {
                        s += vals[k] * x[cols[k]];
                    }
                }
                s
            }
        }
    }

    /// `y = L x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.size);
        let mut y = vec![0.0; self.size];
        y.par_chunks_mut(ROW_BLOCK).enumerate().for_each(|(b, chunk)| {
            for (o, yi) in chunk.iter_mut().enumerate() {
                let i = b * ROW_BLOCK + o;
                *yi = x[i] - self.row_dot(i, x);
            }
        });
        y
    }

    /// `L X` for a block of column vectors.
    pub fn apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.size, x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            let xj: Vec<f64> = col.iter().copied().collect();
            let y = self.apply(&xj);
            out.column_mut(j).copy_from_slice(&y);
        }
        out
    }

    /// Explicit dense `L`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.size;
        let mut l = DMatrix::<f64>::identity(n, n);
        match &self.adjacency {
            Adjacency::Dense(d) => {
                for i in 0..n {
                    for j in 0..n {
                        l[(i, j)] -= d[i * n + j];
                    }
                }
            }
            Adjacency::Sparse { offsets, cols, vals } => {
                for i in 0..n {
                    for k in offsets[i]..offsets[i + 1] {
                        l[(i, cols[k])] -= vals[k];
                    }
                }
            }
        }
        l
    }

    /// `‖L v − λ v‖ / ‖v‖`.
    pub fn residual(&self, lambda: f64, v: &[f64]) -> f64 {
        let lv = self.apply(v);
        let num: f64 = lv.iter().zip(v).map(|(a, b)| (a - lambda * b).powi(2)).sum();
        let den: f64 = v.iter().map(|b| b * b).sum();
        (num / den).sqrt()
    }

    /// `‖(D − W) v − λ D v‖ / ‖D v‖`, the residual of the generalized problem.
    pub fn generalized_residual(&self, lambda: f64, v: &[f64]) -> f64 {
        // (D − W) v = D^{1/2} L D^{1/2} v
        let sqrt_d: Vec<f64> = self.degrees.iter().map(|d| d.sqrt()).collect();
        let u: Vec<f64> = v.iter().zip(&sqrt_d).map(|(a, s)| a * s).collect();
        let lu = self.apply(&u);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..self.size {
            let dv = self.degrees[i] * v[i];
            num += (sqrt_d[i] * lu[i] - lambda * dv).powi(2);
            den += dv * dv;
        }
        (num / den).sqrt()
    }
}

/// Forms `L_sym` of the anchored graph, keeping the feature block's storage kind.
pub fn normalized_laplacian(g: &AnchoredGraph) -> Result<Laplacian> {
    let m = g.feature_size();
    let size = m + 2;
    let (pa, na) = (g.positive_anchor(), g.negative_anchor());
    let alpha = g.alpha();
    let anchor_of = |i: usize| {
        g.label_of(i).map(|l| match l {
            crate::prior::Label::Positive => pa,
            crate::prior::Label::Negative => na,
        })
    };
    let mut degrees: Vec<f64> = (0..m)
        .map(|i| {
            let d = g.feature().row_sum(i);
            if anchor_of(i).is_some() {
                d + alpha
            } else {
                d
            }
        })
        .collect();
    degrees.push(g.positive_indices().iter().map(|_| alpha).sum());
    degrees.push(g.negative_indices().iter().map(|_| alpha).sum());
    let s = inv_sqrt_degrees(&degrees)?;

    let adjacency = match g.feature() {
        FeatureGraph::Dense(w) => {
            let mut data = vec![0.0; size * size];
            data.par_chunks_mut(size).enumerate().for_each(|(i, row)| {
                if i < m {
                    for (j, &v) in w.row(i).iter().enumerate() {
                        row[j] = v * (s[i] * s[j]);
                    }
                    if let Some(a) = anchor_of(i) {
                        row[a] = alpha * (s[i] * s[a]);
                    }
                } else {
                    let members = if i == pa { g.positive_indices() } else { g.negative_indices() };
                    for &j in members {
                        row[j] = alpha * (s[i] * s[j]);
                    }
                }
            });
            Adjacency::Dense(data)
        }
        FeatureGraph::Sparse(sp) => {
            let mut offsets = Vec::with_capacity(size + 1);
            let mut cols = Vec::with_capacity(sp.nnz() + 2 * m);
            let mut vals = Vec::with_capacity(sp.nnz() + 2 * m);
            offsets.push(0);
            for i in 0..m {
                let (c, v) = sp.row(i);
                for (&j, &w) in c.iter().zip(v) {
                    cols.push(j);
                    vals.push(w * (s[i] * s[j]));
                }
                if let Some(a) = anchor_of(i) {
                    cols.push(a);
                    vals.push(alpha * (s[i] * s[a]));
                }
                offsets.push(cols.len());
            }
            for (a, members) in [(pa, g.positive_indices()), (na, g.negative_indices())] {
                for &j in members {
                    cols.push(j);
                    vals.push(alpha * (s[a] * s[j]));
                }
                offsets.push(cols.len());
            }
            Adjacency::Sparse { offsets, cols, vals }
        }
    };
    Ok(Laplacian {
        size,
        degrees,
        adjacency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Lobpcg,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    None,
    /// Divides residuals by `diag(L)`.
    Jacobi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Block size (number of lowest eigenpairs tracked).
    pub k: usize,
    /// Target residual `‖Lv − λv‖` for unit `v`.
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Return `D^{-1/2} v` (generalized-problem eigenvector) instead of the raw `L_sym` vector.
    pub rescale_generalized: bool,
    pub preconditioner: Preconditioner,
    /// Operators smaller than this are decomposed densely.
    pub dense_below: usize,
    /// Retry densely when LOBPCG does not converge.
    pub dense_fallback: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::Lobpcg,
            k: 2,
            tol: 1e-8,
            max_iters: 200,
            seed: 0,
            rescale_generalized: true,
            preconditioner: Preconditioner::None,
            dense_below: 512,
            dense_fallback: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResult {
    /// Second-smallest eigenvalue of `L_sym` (equal for the generalized problem).
    pub lambda2: f64,
    /// Unit-norm Fiedler vector over all `M + 2` vertices.
    pub fiedler: Vec<f64>,
    pub iterations: usize,
    /// `‖L u − λ u‖` of the symmetric-problem eigenvector `u`.
    pub residual: f64,
    /// Residual of the generalized problem, when the vector was rescaled.
    pub generalized_residual: Option<f64>,
    pub method: SolverMethod,
    /// LOBPCG was requested but the dense path produced the result.
    pub fell_back: bool,
    /// Eigenvalues computed by the solver, ascending (full spectrum when dense).
    pub eigenvalues: Vec<f64>,
    /// Per-iteration residuals of the LOBPCG attempt, if any.
    pub residual_history: Vec<f64>,
}

fn dense_pairs(lap: &Laplacian) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if lap.size() > DENSE_LIMIT {
        return Err(Error::SizeGuardrail {
            size: lap.size(),
            limit: DENSE_LIMIT,
        });
    }
    let eig = SymmetricEigen::new(lap.to_dense());
    let mut order: Vec<usize> = (0..lap.size()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(lap.size(), 2.min(lap.size()), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((vals, vecs))
}

/// Eigenvalue gap below which the two lowest pairs are treated as one eigenspace.
const DEGENERATE_GAP: f64 = 1e-10;

/// Picks the unit vector of `span{u1, u2}` orthogonal to the trivial
/// eigenvector `D^{1/2}·1` when `λ1 ≈ λ2`; otherwise returns `u2`.
fn fiedler_direction(lap: &Laplacian, l1: f64, l2: f64, u1: &[f64], u2: &[f64]) -> Vec<f64> {
    if (l2 - l1).abs() > DEGENERATE_GAP {
        return u2.to_vec();
    }
    let t: Vec<f64> = lap.degrees().iter().map(|d| d.sqrt()).collect();
    let a: f64 = u1.iter().zip(&t).map(|(x, y)| x * y).sum();
    let b: f64 = u2.iter().zip(&t).map(|(x, y)| x * y).sum();
    if a == 0.0 && b == 0.0 {
        return u2.to_vec();
    }
    let mut v: Vec<f64> = u1.iter().zip(u2).map(|(x, y)| -b * x + a * y).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Full symmetric eigendecomposition; returns the second-smallest pair of `L_sym`.
pub fn dense_eig_oracle(lap: &Laplacian) -> Result<SpectralResult> {
    if lap.size() < 2 {
        return Err(Error::invalid("operator needs at least two vertices"));
    }
    let (vals, vecs) = dense_pairs(lap)?;
    let u1: Vec<f64> = vecs.column(0).iter().copied().collect();
    let u2: Vec<f64> = vecs.column(1).iter().copied().collect();
    let mut v = fiedler_direction(lap, vals[0], vals[1], &u1, &u2);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    let lambda2 = vals[1];
    Ok(SpectralResult {
        lambda2,
        residual: lap.residual(lambda2, &v),
        fiedler: v,
        iterations: 0,
        generalized_residual: None,
        method: SolverMethod::Dense,
        fell_back: false,
        eigenvalues: vals,
        residual_history: Vec::new(),
    })
}

/// `D^{-1/2} u`, renormalized to unit length.
fn rescale(lap: &Laplacian, u: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = u.iter().zip(lap.degrees()).map(|(x, d)| x / d.sqrt()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn finish(lap: &Laplacian, cfg: &SolverConfig, mut r: SpectralResult) -> SpectralResult {
    if cfg.rescale_generalized {
        r.fiedler = rescale(lap, &r.fiedler);
        r.generalized_residual = Some(lap.generalized_residual(r.lambda2, &r.fiedler));
    }
    r
}

/// Second-smallest eigenpair of `L_sym` by LOBPCG, with a dense path for small
/// operators and (optionally) for LOBPCG failures.
pub fn solve_fiedler(lap: &Laplacian, cfg: &SolverConfig) -> Result<SpectralResult> {
    cfg.validate()?;
    if lap.size() < 3 {
        return Err(Error::invalid(format!(
            "operator of size {} is too small for a bipartition",
            lap.size()
        )));
    }
    let requested_lobpcg = cfg.method == SolverMethod::Lobpcg;
    let use_dense = !requested_lobpcg || lap.size() < cfg.dense_below || 3 * cfg.k > lap.size();
    if use_dense {
        let mut r = dense_eig_oracle(lap)?;
        r.fell_back = requested_lobpcg;
        return Ok(finish(lap, cfg, r));
    }
    match lobpcg(lap, cfg) {
        Ok(out) => {
            let u1: Vec<f64> = out.vectors.column(0).iter().copied().collect();
            let u2: Vec<f64> = out.vectors.column(1).iter().copied().collect();
            let u = fiedler_direction(lap, out.eigenvalues[0], out.eigenvalues[1], &u1, &u2);
            let lambda2 = out.eigenvalues[1];
            let r = SpectralResult {
                lambda2,
                residual: lap.residual(lambda2, &u),
                fiedler: u,
                iterations: out.iterations,
                generalized_residual: None,
                method: SolverMethod::Lobpcg,
                fell_back: false,
                eigenvalues: out.eigenvalues,
                residual_history: out.history,
            };
            Ok(finish(lap, cfg, r))
        }
        Err(Error::Convergence { iterations, last, history }) => {
            if cfg.dense_fallback && lap.size() <= DENSE_LIMIT {
                let mut r = dense_eig_oracle(lap)?;
                r.fell_back = true;
                r.iterations = iterations;
                r.residual_history = history;
                Ok(finish(lap, cfg, r))
            } else {
                Err(Error::Convergence {
                    iterations,
                    last,
                    history,
                })
            }
        }
        Err(e) => Err(e),
    }
}
