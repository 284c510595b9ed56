use serde::{Deserialize, Serialize};

use crate::binarize::Mask;
use crate::error::{Error, Result};

/// Intersection over union. Two empty masks score 1.0.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.grid_h, a.grid_w) != (b.grid_h, b.grid_w) {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", a.grid_h, a.grid_w),
            actual: format!("{}x{}", b.grid_h, b.grid_w),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Both masks empty, so `iou` returned its 1.0 convention.
pub fn both_empty(a: &Mask, b: &Mask) -> bool {
    a.count() == 0 && b.count() == 0
}

pub fn mean_iou<'a>(pairs: impl IntoIterator<Item = (&'a Mask, &'a Mask)>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in pairs {
        sum += iou(a, b)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("mask pairs"));
    }
    Ok(sum / n as f64)
}

/// Inverse participation ratio `Σv⁴ / (Σv²)²`.
pub fn ipr(v: &[f64]) -> Result<f64> {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid("ipr needs a nonzero finite vector"));
    }
    // Scaling by the max entry keeps the fourth powers in range.
    let (mut s2, mut s4) = (0.0, 0.0);
    for &x in v {
        let y = (x / scale) * (x / scale);
        s2 += y;
        s4 += y * y;
    }
    Ok(s4 / (s2 * s2))
}

/// Analytic arithmetic and storage counts for one segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Vertices in the feature graph (tokens plus priors).
    pub vertices: u64,
    pub affinity_flops: u64,
    pub eigensolve_flops: u64,
    pub dense_bytes: u64,
    /// Values plus column indices plus row offsets; `None` without sparsification.
    pub sparse_bytes: Option<u64>,
    /// Stored entries assumed for the sparse estimate.
    pub nnz: Option<u64>,
}

/// `M = n_tokens + n_priors`; affinity `2·M²·d`; eigensolve `I·k·2·M²`
/// (dense) or `I·k·2·nnz` with `nnz = ξ·M`; bytes `8·M²` dense and
/// `12·nnz + 8·(M + 1)` sparse.
pub fn estimate_cost(n_tokens: u64, n_priors: u64, dim: u64, iters: u64, k: u64, xi: Option<u64>) -> CostEstimate {
    let m = n_tokens + n_priors;
    let m2 = m.saturating_mul(m);
    let nnz = xi.map(|x| x.saturating_mul(m));
    let ops = nnz.unwrap_or(m2);
    CostEstimate {
        vertices: m,
        affinity_flops: 2u64.saturating_mul(m2).saturating_mul(dim),
        eigensolve_flops: iters.saturating_mul(k).saturating_mul(2).saturating_mul(ops),
        dense_bytes: 8u64.saturating_mul(m2),
        sparse_bytes: nnz.map(|z| 12u64.saturating_mul(z).saturating_add(8 * (m + 1))),
        nnz,
    }
}
