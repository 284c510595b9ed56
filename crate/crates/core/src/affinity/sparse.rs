use std::cmp::Ordering;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{check_tau, AffinityMatrix, Rows};

/// Symmetric affinity in compressed-row layout, zero diagonal, columns sorted per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAffinity {
    size: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseAffinity {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored entries over `size²`.
    pub fn density(&self) -> f64 {
        self.nnz() as f64 / (self.size as f64 * self.size as f64)
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_offsets[i], self.row_offsets[i + 1]);
        (&self.col_indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |k| vals[k])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.size, self.size);
        for i in 0..self.size {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[(i, j)] = v;
            }
        }
        out
    }
}

fn check_xi(xi: usize, m: usize) -> Result<()> {
    if xi == 0 || xi >= m {
        return Err(Error::invalid(format!("xi = {xi} must lie in 1..={}", m - 1)));
    }
    Ok(())
}

/// The `xi` largest off-diagonal entries of one row, ties to the lower column.
fn top_xi(row: &[f64], i: usize, xi: usize) -> Vec<(usize, f64)> {
    let mut cand: Vec<(usize, f64)> = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &v)| (j, v))
        .collect();
    let order = |a: &(usize, f64), b: &(usize, f64)| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    };
    if xi < cand.len() {
        cand.select_nth_unstable_by(xi - 1, order);
        cand.truncate(xi);
    }
    cand
}

/// Union-symmetrizes per-row selections into CSR.
fn assemble(size: usize, selections: Vec<Vec<(usize, f64)>>) -> SparseAffinity {
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); size];
    for (i, sel) in selections.into_iter().enumerate() {
        for (j, v) in sel {
            adj[i].push((j, v));
            adj[j].push((i, v));
        }
    }
    let mut row_offsets = Vec::with_capacity(size + 1);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    row_offsets.push(0);
    for mut row in adj {
        row.sort_unstable_by_key(|&(j, _)| j);
        row.dedup_by_key(|&mut (j, _)| j);
        for (j, v) in row {
            col_indices.push(j);
            values.push(v);
        }
        row_offsets.push(col_indices.len());
    }
    SparseAffinity {
        size,
        row_offsets,
        col_indices,
        values,
    }
}

/// Keeps the `xi` strongest entries of every row, then symmetrizes by union.
pub fn sparsify(w: &AffinityMatrix, xi: usize) -> Result<SparseAffinity> {
    let m = w.size();
    check_xi(xi, m)?;
    let selections: Vec<_> = (0..m)
        .into_par_iter()
        .map(|i| top_xi(w.row(i), i, xi))
        .collect();
    Ok(assemble(m, selections))
}

/// Same result as `sparsify(build_affinity(tokens, tau), xi)` without
/// materializing the dense matrix.
pub fn sparse_affinity_from_tokens(tokens: &DMatrix<f64>, tau: f64, xi: usize) -> Result<SparseAffinity> {
    check_tau(tau)?;
    let m = tokens.nrows();
    if m < 2 {
        return Err(Error::invalid(format!("need at least two vertices, got {m}")));
    }
    check_xi(xi, m)?;
    let rows = Rows::from_matrix(tokens);
    let selections: Vec<_> = (0..m)
        .into_par_iter()
        .map_init(
            || vec![0.0f64; m],
            |buf, i| {
                for (j, slot) in buf.iter_mut().enumerate() {
                    *slot = if i == j { 0.0 } else { rows.kernel(i, j, tau) };
                }
                top_xi(buf, i, xi)
            },
        )
        .collect();
    Ok(assemble(m, selections))
}
