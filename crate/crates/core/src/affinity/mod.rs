//! Temperature-kernel token affinities, top-ξ sparsification, and anchor augmentation.
//!
//! Every similarity goes through [`dot`], whose arithmetic is symmetric in its
//! arguments, so `W[i][j]` and `W[j][i]` are bit-identical and the dense and
//! sparse routes produce the same values for the same pair.

mod anchors;
mod sparse;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub use anchors::{augment_with_anchors, compute_coupling, AnchoredGraph, FeatureGraph};
pub use sparse::{sparse_affinity_from_tokens, sparsify, SparseAffinity};

/// Added to the temperature before dividing.
pub const TAU_EPS: f64 = 1e-12;

/// Fixed-order dot product with four interleaved accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    for i in 4 * chunks..a.len() {
        acc[0] += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Row-major copy of an `m × d` matrix.
pub(crate) struct Rows {
    data: Vec<f64>,
    d: usize,
}

impl Rows {
    pub fn from_matrix(x: &DMatrix<f64>) -> Self {
        let (m, d) = x.shape();
        let mut data = Vec::with_capacity(m * d);
        for r in 0..m {
            data.extend(x.row(r).iter());
        }
        Rows { data, d }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// `exp(⟨f_i, f_j⟩ / (τ + ε))`.
    #[inline]
    pub fn kernel(&self, i: usize, j: usize, tau: f64) -> f64 {
        (dot(self.row(i), self.row(j)) / (tau + TAU_EPS)).exp()
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Dense symmetric affinity with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    w: DMatrix<f64>,
}

impl AffinityMatrix {
    /// Wraps an existing matrix after checking symmetry, zero diagonal and nonnegativity.
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        let m = w.nrows();
        if w.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: "square matrix".into(),
                actual: format!("{}x{}", m, w.ncols()),
            });
        }
        if m < 2 {
            return Err(Error::invalid("affinity needs at least two vertices"));
        }
        for i in 0..m {
            if w[(i, i)] != 0.0 {
                return Err(Error::invalid(format!("diagonal entry {i} is nonzero")));
            }
            for j in 0..i {
                let (a, b) = (w[(i, j)], w[(j, i)]);
                if !(a >= 0.0) || !a.is_finite() || (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                    return Err(Error::invalid(format!(
                        "entry ({i}, {j}) is negative, non-finite or asymmetric"
                    )));
                }
            }
        }
        Ok(AffinityMatrix { w })
    }

    pub fn size(&self) -> usize {
        self.w.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Row `i` as a contiguous slice (storage is column-major and symmetric).
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.size();
        &self.w.as_slice()[i * m..(i + 1) * m]
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.w
    }
}

/// `W_ij = exp(⟨f_i, f_j⟩ / τ)` for `i ≠ j`, zero diagonal. Rows must be unit norm.
pub fn build_affinity(tokens: &DMatrix<f64>, tau: f64) -> Result<AffinityMatrix> {
    check_tau(tau)?;
    let m = tokens.nrows();
    if m < 2 {
        return Err(Error::invalid(format!("need at least two vertices, got {m}")));
    }
    let rows = Rows::from_matrix(tokens);
    let mut data = vec![0.0f64; m * m];
    data.par_chunks_mut(m).enumerate().for_each(|(i, col)| {
        for (j, slot) in col.iter_mut().enumerate() {
            if i != j {
                *slot = rows.kernel(i, j, tau);
            }
        }
    });
    Ok(AffinityMatrix {
        w: DMatrix::from_vec(m, m, data),
    })
}
