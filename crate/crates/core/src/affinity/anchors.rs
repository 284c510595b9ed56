use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::prior::Label;

use super::{AffinityMatrix, SparseAffinity};

/// Feature-affinity block over tokens and injected prior vertices.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureGraph {
    Dense(AffinityMatrix),
    Sparse(SparseAffinity),
}

impl FeatureGraph {
    pub fn size(&self) -> usize {
        match self {
            FeatureGraph::Dense(w) => w.size(),
            FeatureGraph::Sparse(s) => s.size(),
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, FeatureGraph::Sparse(_))
    }

    /// Sum of stored entries of row `i`, ascending column order.
    pub fn row_sum(&self, i: usize) -> f64 {
        match self {
            FeatureGraph::Dense(w) => w.row(i).iter().sum(),
            FeatureGraph::Sparse(s) => s.row(i).1.iter().sum(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            FeatureGraph::Dense(w) => w.matrix().clone(),
            FeatureGraph::Sparse(s) => s.to_dense(),
        }
    }
}

impl From<AffinityMatrix> for FeatureGraph {
    fn from(w: AffinityMatrix) -> Self {
        FeatureGraph::Dense(w)
    }
}

impl From<SparseAffinity> for FeatureGraph {
    fn from(s: SparseAffinity) -> Self {
        FeatureGraph::Sparse(s)
    }
}

/// Anchor edge weight: `kappa` times the mean off-diagonal affinity
/// (over all `M(M−1)` pairs when dense, over stored entries when sparse).
pub fn compute_coupling(w: &FeatureGraph, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::invalid(format!("kappa must be positive, got {kappa}")));
    }
    let (sum, count) = match w {
        FeatureGraph::Dense(a) => {
            let m = a.size();
            let mut sum = 0.0f64;
            for i in 0..m {
                for (j, &v) in a.row(i).iter().enumerate() {
                    if j != i {
                        sum += v;
                    }
                }
            }
            (sum, m * m.saturating_sub(1))
        }
        FeatureGraph::Sparse(s) => (s.values().iter().sum(), s.nnz()),
    };
    if count == 0 {
        return Err(Error::EmptyInput("feature graph has no off-diagonal entries"));
    }
    Ok(kappa * (sum / count as f64))
}

/// `[[W_feat, C], [Cᵀ, 0]]`: the feature graph plus a positive anchor at index
/// `M` and a negative anchor at `M + 1`, each linked with weight `alpha` to the
/// vertices carrying its label.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredGraph {
    feat: FeatureGraph,
    alpha: f64,
    positive: Vec<usize>,
    negative: Vec<usize>,
    labels: Vec<Option<Label>>,
}

impl AnchoredGraph {
    /// Feature vertices `M`; the full graph has `M + 2`.
    pub fn feature_size(&self) -> usize {
        self.feat.size()
    }

    pub fn size(&self) -> usize {
        self.feat.size() + 2
    }

    pub fn positive_anchor(&self) -> usize {
        self.feat.size()
    }

    pub fn negative_anchor(&self) -> usize {
        self.feat.size() + 1
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn feature(&self) -> &FeatureGraph {
        &self.feat
    }

    pub fn positive_indices(&self) -> &[usize] {
        &self.positive
    }

    pub fn negative_indices(&self) -> &[usize] {
        &self.negative
    }

    /// Label of feature vertex `i`, if it is linked to an anchor.
    pub fn label_of(&self, i: usize) -> Option<Label> {
        self.labels.get(i).copied().flatten()
    }

    /// Full `(M+2) × (M+2)` weight matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.feat.size();
        let mut out = DMatrix::zeros(m + 2, m + 2);
        out.view_mut((0, 0), (m, m)).copy_from(&self.feat.to_dense());
        for &i in &self.positive {
            out[(i, m)] = self.alpha;
            out[(m, i)] = self.alpha;
        }
        for &i in &self.negative {
            out[(i, m + 1)] = self.alpha;
            out[(m + 1, i)] = self.alpha;
        }
        out
    }
}

/// Computes the coupling on `feat` and attaches the two anchors.
pub fn augment_with_anchors(
    feat: FeatureGraph,
    positive: &[usize],
    negative: &[usize],
    kappa: f64,
) -> Result<AnchoredGraph> {
    let alpha = compute_coupling(&feat, kappa)?;
    let m = feat.size();
    let mut labels = vec![None; m];
    let mut sets = [positive.to_vec(), negative.to_vec()];
    for (set, label) in sets.iter_mut().zip([Label::Positive, Label::Negative]) {
        set.sort_unstable();
        set.dedup();
        if set.is_empty() {
            return Err(Error::MissingLabel(label));
        }
        for &i in set.iter() {
            if i >= m {
                return Err(Error::invalid(format!("labeled vertex {i} out of range 0..{m}")));
            }
            if labels[i].is_some() {
                return Err(Error::invalid(format!("vertex {i} carries both labels")));
            }
            labels[i] = Some(label);
        }
    }
    let [positive, negative] = sets;
    Ok(AnchoredGraph {
        feat,
        alpha,
        positive,
        negative,
        labels,
    })
}
