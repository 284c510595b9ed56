//! Seeded k-means (k-means++ init, Lloyd iterations) and representative-image picking.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERS: usize = 100;
pub const SHIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct KMeans {
    /// `k × d`, one centroid per row.
    pub centroids: DMatrix<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

/// One representative image per non-empty cluster.
#[derive(Debug, Clone)]
pub struct RepresentativeSet {
    pub image_ids: Vec<String>,
    /// Input row of each representative.
    pub indices: Vec<usize>,
    pub centroids: DMatrix<f64>,
}

fn sq_dist(data: &DMatrix<f64>, row: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    data.row(row)
        .iter()
        .zip(centroids.row(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn nearest(data: &DMatrix<f64>, row: usize, centroids: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.nrows() {
        let d = sq_dist(data, row, centroids, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(data: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = data.nrows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| {
            data.row(i)
                .iter()
                .zip(data.row(chosen[0]).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every point coincides with a chosen centroid.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            let d: f64 = data
                .row(i)
                .iter()
                .zip(data.row(next).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < *slot {
                *slot = d;
            }
        }
    }
    DMatrix::from_fn(k, data.ncols(), |r, c| data[(chosen[r], c)])
}

/// Lloyd's algorithm with k-means++ seeding, Euclidean metric.
/// Stops after [`MAX_ITERS`] iterations or when no centroid moves more than [`SHIFT_TOL`].
pub fn kmeans(data: &DMatrix<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let n = data.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("k-means input"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        for (i, a) in assignments.iter_mut().enumerate() {
            *a = nearest(data, i, &centroids).0;
        }
        let mut sums = DMatrix::<f64>::zeros(k, data.ncols());
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            let mut row = sums.row_mut(a);
            row += data.row(i);
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new_row = sums.row(c) / counts[c] as f64;
            shift = shift.max((&new_row - centroids.row(c)).norm());
            centroids.set_row(c, &new_row);
        }
        if shift < SHIFT_TOL {
            break;
        }
    }
    for (i, a) in assignments.iter_mut().enumerate() {
        *a = nearest(data, i, &centroids).0;
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
    })
}

/// Clusters image-level CLS descriptors and returns, per cluster, the member
/// closest to its centroid (ties to the lowest input index).
pub fn build_representatives(
    cls: &DMatrix<f64>,
    image_ids: &[String],
    k: usize,
    seed: u64,
) -> Result<RepresentativeSet> {
    if cls.nrows() == 0 {
        return Err(Error::EmptyInput("CLS matrix"));
    }
    if image_ids.len() != cls.nrows() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} image ids", cls.nrows()),
            actual: image_ids.len().to_string(),
        });
    }
    let km = kmeans(cls, k, seed)?;
    let mut best: Vec<Option<(usize, f64)>> = vec![None; k];
    for (i, &c) in km.assignments.iter().enumerate() {
        let d = sq_dist(cls, i, &km.centroids, c);
        match best[c] {
            Some((_, bd)) if bd <= d => {}
            _ => best[c] = Some((i, d)),
        }
    }
    let indices: Vec<usize> = best.into_iter().flatten().map(|(i, _)| i).collect();
    Ok(RepresentativeSet {
        image_ids: indices.iter().map(|&i| image_ids[i].clone()).collect(),
        indices,
        centroids: km.centroids,
    })
}
