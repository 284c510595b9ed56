//! Planted-cluster token grids with known ground truth.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binarize::Mask;
use crate::error::{Error, Result};
use crate::exchange::{ImageMeta, TokenGrid};
use crate::prior::{Label, PriorBank, PriorEntry};

/// Exact bank copies stored per cluster center.
pub const BANK_COPIES: usize = 3;

#[derive(Debug, Clone)]
pub struct Planted {
    pub grid: TokenGrid,
    /// Cluster-0 membership.
    pub truth: Mask,
    pub bank: PriorBank,
    /// Cluster id per token.
    pub assignment: Vec<usize>,
    /// Unit cluster directions as rows.
    pub centers: DMatrix<f64>,
}

/// Cluster of token `(r, c)`: cluster 0 fills the central block
/// `[h/4, 3h/4) × [w/4, 3w/4)`, the others split the rest into column bands.
fn layout(h: usize, w: usize, n_clusters: usize) -> Vec<usize> {
    let (r0, r1) = (h / 4, (3 * h).div_ceil(4));
    let (c0, c1) = (w / 4, (3 * w).div_ceil(4));
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            if (r0..r1).contains(&r) && (c0..c1).contains(&c) {
                out.push(0);
            } else {
                out.push(1 + c * (n_clusters - 1) / w);
            }
        }
    }
    out
}

/// Unit directions with pairwise angle `separation`: `√cosθ·f + √(1−cosθ)·e_c`
/// over orthonormal axes, exactly orthogonal at 90°.
fn directions(n_clusters: usize, dim: usize, separation: f64) -> Result<DMatrix<f64>> {
    let cos = if separation == FRAC_PI_2 { 0.0 } else { separation.cos() };
    let need = if cos == 0.0 { n_clusters } else { n_clusters + 1 };
    if dim < need {
        return Err(Error::invalid(format!(
            "dim {dim} too small for {n_clusters} clusters at this separation (need {need})"
        )));
    }
    let (a, b) = (cos.sqrt(), (1.0 - cos).sqrt());
    let mut m = DMatrix::zeros(n_clusters, dim);
    for c in 0..n_clusters {
        m[(c, c)] = b;
        if cos != 0.0 {
            m[(c, n_clusters)] = a;
        }
    }
    Ok(m)
}

/// Tokens are unit-normalized `center + noise·g` samples; the bank holds
/// [`BANK_COPIES`] exact copies of every center, cluster 0 positive and the
/// rest negative.
pub fn planted_clusters(
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    n_clusters: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<Planted> {
    if n_clusters < 2 {
        return Err(Error::invalid(format!("need at least 2 clusters, got {n_clusters}")));
    }
    if !(separation > 0.0 && separation <= FRAC_PI_2) {
        return Err(Error::invalid(format!("separation {separation} outside (0, π/2]")));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid(format!("noise {noise} must be finite and nonnegative")));
    }
    if grid_h < 2 || grid_w < 2 || grid_w < n_clusters - 1 {
        return Err(Error::invalid(format!("grid {grid_h}x{grid_w} too small")));
    }
    let centers = directions(n_clusters, dim, separation)?;
    let assignment = layout(grid_h, grid_w, n_clusters);
    let n = grid_h * grid_w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = DMatrix::zeros(n, dim);
    for i in 0..n {
        for j in 0..dim {
            let z = if noise > 0.0 { noise * normal.sample(&mut rng) } else { 0.0 };
            rows[(i, j)] = centers[(assignment[i], j)] + z;
        }
    }
    let meta = ImageMeta::synthetic(format!("planted-{seed}"), grid_h, grid_w);
    let grid = TokenGrid::from_rows(grid_h, grid_w, &rows, None, meta)?;
    let truth = Mask::new(grid_h, grid_w, assignment.iter().map(|&c| c == 0).collect())?;

    let mut entries = Vec::with_capacity(n_clusters * BANK_COPIES);
    for c in 0..n_clusters {
        let token_index = assignment.iter().position(|&a| a == c).unwrap_or(0);
        let embedding: Vec<f32> = centers.row(c).iter().map(|&x| x as f32).collect();
        for _ in 0..BANK_COPIES {
            entries.push(PriorEntry {
                embedding: embedding.clone(),
                label: if c == 0 { Label::Positive } else { Label::Negative },
                source_image: format!("center-{c}"),
                token_index,
            });
        }
    }
    let bank = PriorBank::new(entries, dim)?;
    Ok(Planted {
        grid,
        truth,
        bank,
        assignment,
        centers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_noise_free_geometry() {
        let p = planted_clusters(6, 6, 8, 2, FRAC_PI_2, 0.0, 1).unwrap();
        let x = p.grid.tokens_f64();
        let g = &x * x.transpose();
        for i in 0..36 {
            for j in 0..36 {
                let same = p.assignment[i] == p.assignment[j];
                assert_eq!(g[(i, j)], if same { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(p.truth.count(), 16);
        assert_eq!(p.bank.len(), 2 * BANK_COPIES);
    }

    #[test]
    fn separation_sets_cross_cosine() {
        let theta = 1.0f64;
        let p = planted_clusters(4, 4, 6, 3, theta, 0.0, 0).unwrap();
        let c = &p.centers;
        for a in 0..3 {
            for b in 0..3 {
                let d = c.row(a).dot(&c.row(b));
                let want = if a == b { 1.0 } else { theta.cos() };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeds_change_noise_not_structure() {
        let a = planted_clusters(5, 5, 4, 2, FRAC_PI_2, 0.1, 1).unwrap();
        let b = planted_clusters(5, 5, 4, 2, FRAC_PI_2, 0.1, 2).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.truth, b.truth);
        assert_ne!(a.grid.raw_tokens(), b.grid.raw_tokens());
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(planted_clusters(6, 6, 8, 1, FRAC_PI_2, 0.0, 0).is_err());
        assert!(planted_clusters(6, 6, 8, 2, 0.0, 0.0, 0).is_err());
        assert!(planted_clusters(6, 6, 8, 2, 2.0, 0.0, 0).is_err());
        assert!(planted_clusters(6, 6, 2, 2, 1.0, 0.0, 0).is_err());
        assert!(planted_clusters(6, 6, 8, 2, FRAC_PI_2, -1.0, 0).is_err());
    }
}
