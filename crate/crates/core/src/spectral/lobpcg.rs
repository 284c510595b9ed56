//! Locally optimal block preconditioned conjugate gradient for the smallest
//! eigenpairs of a symmetric operator.
//!
//! Each iteration runs Rayleigh–Ritz on the span of `[X, R, P]` (current
//! iterates, residuals of unconverged columns, previous search directions),
//! orthonormalized with two passes of modified Gram–Schmidt. The projected
//! problem is solved with a cyclic Jacobi sweep, and `P` is carried implicitly
//! as the part of the new iterates lying outside the old `X`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

use super::jacobi::symmetric_eigen;
use super::{Laplacian, Preconditioner, SolverConfig};

/// Columns whose norm falls below this fraction of their pre-projection norm
/// are treated as linearly dependent and dropped from the search basis.
const DROP_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LobpcgOutput {
    /// Ascending Ritz values.
    pub eigenvalues: Vec<f64>,
    /// Unit-norm Ritz vectors as columns.
    pub vectors: DMatrix<f64>,
    pub iterations: usize,
    /// Final residual norm per column.
    pub residuals: Vec<f64>,
    /// Largest column residual after every iteration.
    pub history: Vec<f64>,
}

/// Appends `cols` to the orthonormal set `basis`, skipping dependent columns.
fn extend_orthonormal(basis: &mut Vec<Vec<f64>>, cols: impl IntoIterator<Item = Vec<f64>>) {
    for mut c in cols {
        let before = norm(&c);
        if !(before > 0.0) || !before.is_finite() {
            continue;
        }
        for _pass in 0..2 {
            for q in basis.iter() {
                let proj = dot(q, &c);
                for (ci, qi) in c.iter_mut().zip(q) {
                    *ci -= proj * qi;
                }
            }
        }
        let after = norm(&c);
        if after <= DROP_TOL * before {
            continue;
        }
        for ci in c.iter_mut() {
            *ci /= after;
        }
        basis.push(c);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

fn from_columns(n: usize, cols: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r])
}

/// Rayleigh–Ritz on an orthonormal basis `q` with images `aq`. Returns the
/// `k` lowest Ritz values and their coefficient vectors.
fn rayleigh_ritz(q: &DMatrix<f64>, aq: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let g = q.transpose() * aq;
    let g = (&g + g.transpose()) * 0.5;
    let (vals, vecs) = symmetric_eigen(&g);
    (vals[..k].to_vec(), vecs.columns(0, k).into_owned())
}

/// Smallest `cfg.k` eigenpairs of `lap`, starting from a seeded Gaussian block.
pub fn lobpcg(lap: &Laplacian, cfg: &SolverConfig) -> Result<LobpcgOutput> {
    let n = lap.size();
    let k = cfg.k;
    if k == 0 || 3 * k > n {
        return Err(Error::invalid(format!(
            "block size {k} too large for an operator of size {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut basis = Vec::with_capacity(k);
    extend_orthonormal(&mut basis, init);
    if basis.len() < k {
        return Err(Error::invalid("degenerate initial block"));
    }
    let q = from_columns(n, &basis);
    let aq = lap.apply_block(&q);
    let (mut lambda, c) = rayleigh_ritz(&q, &aq, k);
    let mut x = &q * &c;
    let mut ax = &aq * &c;
    let mut p: Option<DMatrix<f64>> = None;

    let inv_diag: Option<Vec<f64>> = match cfg.preconditioner {
        Preconditioner::None => None,
        Preconditioner::Jacobi => Some(lap.diagonal().iter().map(|&d| 1.0 / d).collect()),
    };
    let sqrt_deg: Vec<f64> = lap.degrees().iter().map(|d| d.sqrt()).collect();

    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut r = ax.clone();
        for (j, &l) in lambda.iter().enumerate() {
            let mut col = r.column_mut(j);
            col.axpy(-l, &x.column(j), 1.0);
        }
        let residuals: Vec<f64> = r.column_iter().map(|c| c.norm()).collect();
        history.push(residuals.iter().cloned().fold(0.0, f64::max));

        let mut converged: Vec<bool> = residuals.iter().map(|&res| res <= cfg.tol).collect();
        if cfg.rescale_generalized && k > 1 && converged[1] {
            // ‖(D−W)v − λDv‖ / ‖Dv‖ for v = D^{-1/2} x equals ‖D^{1/2} r‖ / ‖D^{1/2} x‖.
            let num: f64 = r.column(1).iter().zip(&sqrt_deg).map(|(a, s)| (a * s).powi(2)).sum();
            let den: f64 = x.column(1).iter().zip(&sqrt_deg).map(|(a, s)| (a * s).powi(2)).sum();
            converged[1] = (num / den).sqrt() <= 10.0 * cfg.tol;
        }
        if converged.iter().all(|&c| c) {
            return Ok(LobpcgOutput {
                eigenvalues: lambda,
                vectors: x,
                iterations,
                residuals,
                history,
            });
        }
        if iterations >= cfg.max_iters {
            return Err(Error::Convergence {
                iterations,
                last: *history.last().unwrap(),
                history,
            });
        }
        iterations += 1;

        let active: Vec<usize> = (0..k).filter(|&j| !converged[j]).collect();
        let mut w_cols: Vec<Vec<f64>> = active
            .iter()
            .map(|&j| r.column(j).iter().copied().collect())
            .collect();
        if let Some(inv) = &inv_diag {
            for col in w_cols.iter_mut() {
                for (v, d) in col.iter_mut().zip(inv) {
                    *v *= d;
                }
            }
        }

        let mut basis = Vec::with_capacity(3 * k);
        extend_orthonormal(&mut basis, columns(&x));
        if basis.len() < k {
            return Err(Error::invalid("iterate block lost rank"));
        }
        extend_orthonormal(&mut basis, w_cols);
        if let Some(p) = &p {
            extend_orthonormal(&mut basis, active.iter().map(|&j| p.column(j).iter().copied().collect()));
        }
        let q = from_columns(n, &basis);
        let aq = lap.apply_block(&q);
        let (new_lambda, c) = rayleigh_ritz(&q, &aq, k);
        let new_x = &q * &c;
        ax = &aq * &c;
        let tail = q.ncols() - k;
        p = (tail > 0).then(|| q.columns(k, tail) * c.rows(k, tail));
        x = new_x;
        lambda = new_lambda;
    }
}
