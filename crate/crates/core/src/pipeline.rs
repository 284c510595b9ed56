//! End-to-end segmentation of one token grid, and batches of them.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::{augment_with_anchors, build_affinity, sparse_affinity_from_tokens, FeatureGraph};
use crate::binarize::{
    binarize, normalize_minmax, orient, threshold_exact, threshold_median, threshold_roc, Mask, MinMax,
    Orientation, ScoreField, ThresholdReport, ThresholdStrategy, DEFAULT_GRID_STEPS,
};
use crate::error::{Error, Result, StageExt};
use crate::exchange::{read_token_grid, TokenGrid};
use crate::metrics::{both_empty, estimate_cost, iou, ipr, CostEstimate};
use crate::prior::{select_priors, Label, PriorBank, PriorSelection, RetrievalConfig};
use crate::spectral::{normalized_laplacian, solve_fiedler, Laplacian, SolverConfig, SolverMethod, SpectralResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Affinity temperature.
    pub tau: f64,
    /// Anchor coupling multiplier.
    pub kappa: f64,
    pub retrieval: RetrievalConfig,
    pub solver: SolverConfig,
    pub threshold: ThresholdStrategy,
    /// Scan unique score values instead of the uniform grid (ROC only).
    pub threshold_exact: bool,
    pub grid_steps: usize,
    /// Keep the `xi` strongest neighbours per vertex; dense when unset.
    pub xi: Option<usize>,
    pub orientation: Orientation,
    /// Overrides the retrieval and solver seeds when set.
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Preset::Saliency.config()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Saliency,
    Coco,
    Homogeneous,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Saliency, Preset::Coco, Preset::Homogeneous];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Saliency => "saliency",
            Preset::Coco => "coco",
            Preset::Homogeneous => "homogeneous",
        }
    }

    pub fn from_name(name: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Injected prior vertices, split evenly between the two labels.
    pub fn injected_vertices(self) -> usize {
        match self {
            Preset::Saliency => 1500,
            Preset::Coco => 3500,
            Preset::Homogeneous => 2500,
        }
    }

    /// Representative images kept when building the bank, where fixed.
    pub fn bank_size(self) -> Option<usize> {
        match self {
            Preset::Saliency => Some(30),
            Preset::Coco => None,
            Preset::Homogeneous => Some(5),
        }
    }

    pub fn config(self) -> PipelineConfig {
        let kappa = match self {
            Preset::Saliency => 1.0,
            Preset::Coco => 400.0,
            Preset::Homogeneous => 1000.0,
        };
        PipelineConfig {
            tau: 0.7,
            kappa,
            retrieval: RetrievalConfig::with_quota(self.injected_vertices() / 2),
            solver: SolverConfig::default(),
            threshold: ThresholdStrategy::Roc,
            threshold_exact: false,
            grid_steps: DEFAULT_GRID_STEPS,
            xi: None,
            orientation: Orientation::Median,
            seed: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::invalid(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.grid_steps < 2 {
            return Err(Error::invalid(format!("grid_steps must be at least 2, got {}", self.grid_steps)));
        }
        if self.xi == Some(0) {
            return Err(Error::invalid("xi must be at least 1"));
        }
        self.retrieval.validate()?;
        self.solver.validate()
    }

    fn retrieval_cfg(&self) -> RetrievalConfig {
        let mut r = self.retrieval.clone();
        if let Some(s) = self.seed {
            r.seed = s;
        }
        r
    }

    fn solver_cfg(&self) -> SolverConfig {
        let mut s = self.solver.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }
}

/// Graph stage of the pipeline: everything up to the Laplacian.
///
/// Vertex layout is `[tokens | positive priors | negative priors | anchor+ | anchor−]`.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub image_id: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub selection: PriorSelection,
    /// Label of each injected prior vertex, in vertex order.
    pub prior_labels: Vec<Label>,
    /// Feature vertices linked to the positive / negative anchor.
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub alpha: f64,
    pub nnz: Option<usize>,
    pub laplacian: Laplacian,
}

impl PreparedGraph {
    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn n_priors(&self) -> usize {
        self.prior_labels.len()
    }

    pub fn solve(&self, cfg: &PipelineConfig) -> Result<SpectralResult> {
        solve_fiedler(&self.laplacian, &cfg.solver_cfg()).stage("solve_fiedler")
    }

    /// Orientation, scaling and thresholding of a solved vector.
    pub fn binarize(&self, v: &[f64], cfg: &PipelineConfig) -> Result<Binarized> {
        let n = self.n_tokens();
        let (v, flipped) = orient(v, &self.positive, &self.negative, cfg.orientation).stage("orient")?;
        let (scores, map) = normalize_minmax(&v[..n], self.grid_h, self.grid_w).stage("normalize")?;
        let prior_scores: Vec<f64> = v[n..n + self.n_priors()].iter().map(|&x| map.apply(x)).collect();
        let threshold = match cfg.threshold {
            ThresholdStrategy::Roc if cfg.threshold_exact => {
                threshold_exact(&scores, &prior_scores, &self.prior_labels)
            }
            ThresholdStrategy::Roc => threshold_roc(&prior_scores, &self.prior_labels, cfg.grid_steps),
            ThresholdStrategy::Median => threshold_median(&scores),
        }
        .stage("threshold")?;
        let mask = binarize(&scores, threshold.t_star).stage("binarize")?;
        Ok(Binarized {
            mask,
            scores,
            map,
            prior_scores,
            threshold,
            flipped,
        })
    }

    /// Assembles the final record from a solved vector.
    pub fn finish(&self, spectral: SpectralResult, cfg: &PipelineConfig) -> Result<Segmentation> {
        let b = self.binarize(&spectral.fiedler, cfg)?;
        let cost = estimate_cost(
            self.n_tokens() as u64,
            self.n_priors() as u64,
            self.dim as u64,
            spectral.iterations.max(1) as u64,
            cfg.solver.k as u64,
            cfg.xi.map(|x| x as u64),
        );
        let ipr = ipr(&spectral.fiedler[..self.n_tokens()]).unwrap_or(f64::NAN);
        Ok(Segmentation {
            image_id: self.image_id.clone(),
            mask: b.mask,
            scores: b.scores,
            threshold: b.threshold,
            prior_scores: b.prior_scores,
            flipped: b.flipped,
            alpha: self.alpha,
            positive_priors: self.selection.positive.len(),
            negative_priors: self.selection.negative.len(),
            ipr,
            spectral,
            cost,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binarized {
    pub mask: Mask,
    pub scores: ScoreField,
    pub map: MinMax,
    pub prior_scores: Vec<f64>,
    pub threshold: ThresholdReport,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub image_id: String,
    pub mask: Mask,
    pub scores: ScoreField,
    pub threshold: ThresholdReport,
    /// Injected prior vertices on the token score scale (may leave `[0, 1]`).
    pub prior_scores: Vec<f64>,
    pub flipped: bool,
    pub alpha: f64,
    pub positive_priors: usize,
    pub negative_priors: usize,
    /// Localization of the token part of the Fiedler vector.
    pub ipr: f64,
    pub spectral: SpectralResult,
    pub cost: CostEstimate,
}

/// Builds the anchored graph and its Laplacian. `token_labels` additionally
/// links labeled image tokens to the anchors.
pub fn prepare_graph(
    grid: &TokenGrid,
    bank: &PriorBank,
    cfg: &PipelineConfig,
    token_labels: &[(usize, Label)],
) -> Result<PreparedGraph> {
    cfg.validate()?;
    if bank.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("embedding dimension {}", grid.dim()),
            actual: format!("bank dimension {}", bank.dim()),
        });
    }
    let selection = select_priors(bank, grid, &cfg.retrieval_cfg()).stage("select_priors")?;
    let n = grid.n();
    let order: Vec<usize> = selection.positive.iter().chain(&selection.negative).copied().collect();
    let mut prior_labels = vec![Label::Positive; selection.positive.len()];
    prior_labels.resize(order.len(), Label::Negative);

    let tokens = grid.tokens_f64();
    let priors = bank.embeddings_f64(&order);
    let m = n + order.len();
    let mut x = DMatrix::zeros(m, grid.dim());
    x.view_mut((0, 0), (n, grid.dim())).copy_from(&tokens);
    x.view_mut((n, 0), (order.len(), grid.dim())).copy_from(&priors);

    let feat: FeatureGraph = match cfg.xi {
        None => build_affinity(&x, cfg.tau).stage("build_affinity")?.into(),
        Some(xi) => sparse_affinity_from_tokens(&x, cfg.tau, xi).stage("sparsify")?.into(),
    };
    let nnz = match &feat {
        FeatureGraph::Sparse(s) => Some(s.nnz()),
        FeatureGraph::Dense(_) => None,
    };

    let mut positive: Vec<usize> = (n..n + selection.positive.len()).collect();
    let mut negative: Vec<usize> = (n + selection.positive.len()..m).collect();
    for &(i, l) in token_labels {
        if i >= n {
            return Err(Error::invalid(format!("labeled token {i} out of range 0..{n}")));
        }
        match l {
            Label::Positive => positive.push(i),
            Label::Negative => negative.push(i),
        }
    }
    let graph = augment_with_anchors(feat, &positive, &negative, cfg.kappa).stage("augment_with_anchors")?;
    let laplacian = normalized_laplacian(&graph).stage("normalized_laplacian")?;
    Ok(PreparedGraph {
        image_id: grid.meta().image_id.clone(),
        grid_h: grid.grid_h(),
        grid_w: grid.grid_w(),
        dim: grid.dim(),
        selection,
        prior_labels,
        positive: graph.positive_indices().to_vec(),
        negative: graph.negative_indices().to_vec(),
        alpha: graph.alpha(),
        nnz,
        laplacian,
    })
}

pub fn segment_image(grid: &TokenGrid, bank: &PriorBank, cfg: &PipelineConfig) -> Result<Segmentation> {
    segment_image_with_labels(grid, bank, cfg, &[])
}

pub fn segment_image_with_labels(
    grid: &TokenGrid,
    bank: &PriorBank,
    cfg: &PipelineConfig,
    token_labels: &[(usize, Label)],
) -> Result<Segmentation> {
    let prep = prepare_graph(grid, bank, cfg, token_labels)?;
    let spectral = prep.solve(cfg)?;
    prep.finish(spectral, cfg)
}

/// Summary of one image in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub path: String,
    pub image_id: Option<String>,
    pub ok: bool,
    pub error: Option<String>,
    /// Against ground truth, when supplied.
    pub iou: Option<f64>,
    /// Prediction and ground truth were both empty.
    pub empty_pair: bool,
    pub foreground: Option<usize>,
    pub ipr: Option<f64>,
    pub lambda2: Option<f64>,
    pub residual: Option<f64>,
    pub iterations: Option<usize>,
    pub method: Option<SolverMethod>,
    pub fell_back: Option<bool>,
    pub threshold: Option<ThresholdReport>,
    pub flipped: Option<bool>,
    pub alpha: Option<f64>,
    pub cost: Option<CostEstimate>,
}

impl ImageReport {
    pub fn success(path: &Path, seg: &Segmentation, truth: Option<&Mask>) -> Self {
        let (iou, empty_pair) = match truth.map(|t| (iou(&seg.mask, t), both_empty(&seg.mask, t))) {
            Some((Ok(v), e)) => (Some(v), e),
            _ => (None, false),
        };
        ImageReport {
            path: path.display().to_string(),
            image_id: Some(seg.image_id.clone()),
            ok: true,
            error: None,
            iou,
            empty_pair,
            foreground: Some(seg.mask.count()),
            ipr: Some(seg.ipr),
            lambda2: Some(seg.spectral.lambda2),
            residual: Some(seg.spectral.residual),
            iterations: Some(seg.spectral.iterations),
            method: Some(seg.spectral.method),
            fell_back: Some(seg.spectral.fell_back),
            threshold: Some(seg.threshold.clone()),
            flipped: Some(seg.flipped),
            alpha: Some(seg.alpha),
            cost: Some(seg.cost.clone()),
        }
    }

    pub fn failure(path: &Path, err: &Error) -> Self {
        ImageReport {
            path: path.display().to_string(),
            image_id: None,
            ok: false,
            error: Some(err.to_string()),
            iou: None,
            empty_pair: false,
            foreground: None,
            ipr: None,
            lambda2: None,
            residual: None,
            iterations: None,
            method: None,
            fell_back: None,
            threshold: None,
            flipped: None,
            alpha: None,
            cost: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub images: Vec<ImageReport>,
    pub succeeded: usize,
    pub failed: usize,
    /// Mean over images that have an IoU.
    pub mean_iou: Option<f64>,
}

impl BatchReport {
    pub fn from_images(images: Vec<ImageReport>) -> Self {
        let ious: Vec<f64> = images.iter().filter_map(|r| r.iou).collect();
        let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
        let succeeded = images.iter().filter(|r| r.ok).count();
        BatchReport {
            failed: images.len() - succeeded,
            succeeded,
            mean_iou,
            images,
        }
    }
}

#[derive(Debug)]
pub struct BatchOutput {
    /// One entry per manifest line, in manifest order.
    pub results: Vec<(PathBuf, Result<Segmentation>)>,
    pub report: BatchReport,
}

/// Segments every grid in `manifest` on a pool of `workers` threads.
/// `truth` supplies an optional ground-truth mask per loaded grid.
pub fn batch_segment<F>(
    manifest: &[PathBuf],
    bank: &PriorBank,
    cfg: &PipelineConfig,
    workers: usize,
    truth: F,
) -> Result<BatchOutput>
where
    F: Fn(&Path, &TokenGrid) -> Option<Mask> + Sync,
{
    if manifest.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let items: Vec<(PathBuf, Result<Segmentation>, Option<Mask>)> = pool.install(|| {
        manifest
            .par_iter()
            .map(|path| match read_token_grid(path).stage("read_token_grid") {
                Ok(grid) => {
                    let gt = truth(path, &grid);
                    (path.clone(), segment_image(&grid, bank, cfg), gt)
                }
                Err(e) => (path.clone(), Err(e), None),
            })
            .collect()
    });
    let images = items
        .iter()
        .map(|(p, r, gt)| match r {
            Ok(seg) => ImageReport::success(p, seg, gt.as_ref()),
            Err(e) => ImageReport::failure(p, e),
        })
        .collect();
    Ok(BatchOutput {
        report: BatchReport::from_images(images),
        results: items.into_iter().map(|(p, r, _)| (p, r)).collect(),
    })
}
