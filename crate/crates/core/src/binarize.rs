//! Orientation, min-max scaling and thresholding of the Fiedler vector.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::Label;

/// Ranges narrower than this are treated as constant.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Scaled scores this close to 0 or 1 are snapped onto the end point, so
/// eigensolver round-off on tied vertices cannot cross a threshold at 0 or 1.
pub const SCORE_SNAP: f64 = 1e-9;

/// Default ROC threshold grid size.
pub const DEFAULT_GRID_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    #[default]
    Median,
    Mean,
}

/// Median with the even-length convention (mean of the two central values).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn center(values: &[f64], how: Orientation) -> Option<f64> {
    match how {
        Orientation::Median => median(values),
        Orientation::Mean => {
            (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// Flips `v` when its positive-vertex center lies below the negative one.
/// Returns the oriented vector and whether it was negated.
pub fn orient(v: &[f64], positive: &[usize], negative: &[usize], how: Orientation) -> Result<(Vec<f64>, bool)> {
    let gather = |idx: &[usize], label| -> Result<Vec<f64>> {
        if idx.is_empty() {
            return Err(Error::MissingLabel(label));
        }
        idx.iter()
            .map(|&i| {
                v.get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range 0..{}", v.len())))
            })
            .collect()
    };
    let pos = gather(positive, Label::Positive)?;
    let neg = gather(negative, Label::Negative)?;
    let (cp, cn) = (center(&pos, how).unwrap(), center(&neg, how).unwrap());
    if cp < cn {
        Ok((v.iter().map(|x| -x).collect(), true))
    } else {
        Ok((v.to_vec(), false))
    }
}

/// Affine map `x ↦ (x − min) / (max − min)` fitted on token entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn degenerate(&self) -> bool {
        self.max - self.min < DEGENERATE_RANGE
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.degenerate() {
            return 0.5;
        }
        let s = (x - self.min) / (self.max - self.min);
        if s.abs() < SCORE_SNAP {
            0.0
        } else if (s - 1.0).abs() < SCORE_SNAP {
            1.0
        } else {
            s
        }
    }
}

/// Per-token scores in `[0, 1]` over the image grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreField {
    pub grid_h: usize,
    pub grid_w: usize,
    pub scores: Vec<f64>,
    /// Input was constant; every score is 0.5.
    pub degenerate: bool,
}

impl ScoreField {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Min-max normalizes token entries; also returns the fitted map so other
/// entries of the same vector can be placed on the same scale.
pub fn normalize_minmax(v: &[f64], grid_h: usize, grid_w: usize) -> Result<(ScoreField, MinMax)> {
    if v.is_empty() {
        return Err(Error::EmptyInput("score vector"));
    }
    if v.len() != grid_h * grid_w {
        return Err(Error::DimensionMismatch {
            expected: format!("{grid_h}x{grid_w} scores"),
            actual: v.len().to_string(),
        });
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite score at {i}")));
    }
    let mut map = MinMax {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
    };
    for &x in v {
        map.min = map.min.min(x);
        map.max = map.max.max(x);
    }
    let scores = v.iter().map(|&x| map.apply(x)).collect();
    Ok((
        ScoreField {
            grid_h,
            grid_w,
            scores,
            degenerate: map.degenerate(),
        },
        map,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdStrategy {
    #[default]
    Roc,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub t_star: f64,
    pub strategy: ThresholdStrategy,
    /// `TPR − FPR` on the prior scores at `t_star` (ROC only).
    pub j_stat: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    /// Grid size, or `None` for the unique-values scan and the median.
    pub grid_steps: Option<usize>,
    /// Best `J` was not positive: priors rank the wrong way round.
    pub inverted: bool,
}

/// Sorted prior scores split by label.
struct Split {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl Split {
    fn new(prior_scores: &[f64], prior_labels: &[Label]) -> Result<Self> {
        if prior_scores.len() != prior_labels.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} prior labels", prior_scores.len()),
                actual: prior_labels.len().to_string(),
            });
        }
        if let Some(i) = prior_scores.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite prior score at {i}")));
        }
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (&s, &l) in prior_scores.iter().zip(prior_labels) {
            match l {
                Label::Positive => pos.push(s),
                Label::Negative => neg.push(s),
            }
        }
        if pos.is_empty() {
            return Err(Error::MissingLabel(Label::Positive));
        }
        if neg.is_empty() {
            return Err(Error::MissingLabel(Label::Negative));
        }
        pos.sort_by(f64::total_cmp);
        neg.sort_by(f64::total_cmp);
        Ok(Split { pos, neg })
    }

    /// `(TPR, FPR)` under `score > t`.
    fn rates(&self, t: f64) -> (f64, f64) {
        let above = |v: &[f64]| (v.len() - v.partition_point(|&x| x <= t)) as f64 / v.len() as f64;
        (above(&self.pos), above(&self.neg))
    }

    /// First candidate attaining the largest `J`.
    fn best(&self, candidates: impl Iterator<Item = f64>) -> (f64, f64, f64, f64) {
        let mut best: Option<(f64, f64, f64, f64)> = None;
        for t in candidates {
            let (tpr, fpr) = self.rates(t);
            let j = tpr - fpr;
            if best.is_none_or(|b| j > b.1) {
                best = Some((t, j, tpr, fpr));
            }
        }
        best.expect("at least one candidate")
    }
}

/// Youden-J threshold over the uniform grid `t_i = i / (steps − 1)`.
pub fn threshold_roc(prior_scores: &[f64], prior_labels: &[Label], steps: usize) -> Result<ThresholdReport> {
    if steps < 2 {
        return Err(Error::invalid(format!("grid needs at least 2 steps, got {steps}")));
    }
    let split = Split::new(prior_scores, prior_labels)?;
    let last = (steps - 1) as f64;
    let (t, j, tpr, fpr) = split.best((0..steps).map(|i| i as f64 / last));
    Ok(ThresholdReport {
        t_star: t,
        strategy: ThresholdStrategy::Roc,
        j_stat: Some(j),
        tpr: Some(tpr),
        fpr: Some(fpr),
        grid_steps: Some(steps),
        inverted: j <= 0.0,
    })
}

/// Youden-J threshold over the unique values of the token scores together
/// with the prior scores that fall inside `[0, 1]`.
pub fn threshold_exact(scores: &ScoreField, prior_scores: &[f64], prior_labels: &[Label]) -> Result<ThresholdReport> {
    let split = Split::new(prior_scores, prior_labels)?;
    let mut cand: Vec<f64> = scores
        .scores
        .iter()
        .chain(prior_scores.iter().filter(|x| (0.0..=1.0).contains(*x)))
        .copied()
        .collect();
    cand.push(0.0);
    cand.sort_by(f64::total_cmp);
    cand.dedup();
    let (t, j, tpr, fpr) = split.best(cand.into_iter());
    Ok(ThresholdReport {
        t_star: t,
        strategy: ThresholdStrategy::Roc,
        j_stat: Some(j),
        tpr: Some(tpr),
        fpr: Some(fpr),
        grid_steps: None,
        inverted: j <= 0.0,
    })
}

/// Median of all token scores.
pub fn threshold_median(scores: &ScoreField) -> Result<ThresholdReport> {
    let t = median(&scores.scores).ok_or(Error::EmptyInput("score field"))?;
    Ok(ThresholdReport {
        t_star: t,
        strategy: ThresholdStrategy::Median,
        j_stat: None,
        tpr: None,
        fpr: None,
        grid_steps: None,
        inverted: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(grid_h: usize, grid_w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid_h * grid_w {
            return Err(Error::DimensionMismatch {
                expected: format!("{grid_h}x{grid_w} mask"),
                actual: bits.len().to_string(),
            });
        }
        Ok(Mask { grid_h, grid_w, bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.grid_w + col]
    }

    pub fn complement(&self) -> Mask {
        Mask {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Row-major 8-bit gray levels, 255 for foreground.
    pub fn to_gray(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    /// Reads gray levels back, treating anything above 127 as foreground.
    pub fn from_gray(grid_h: usize, grid_w: usize, gray: &[u8]) -> Result<Self> {
        Mask::new(grid_h, grid_w, gray.iter().map(|&g| g > 127).collect())
    }

    /// Nearest-neighbour upsampling where each cell covers `patch × patch`
    /// pixels, cropped to `height × width`.
    pub fn upsample(&self, patch: usize, height: usize, width: usize) -> Result<Mask> {
        if patch == 0 || height > self.grid_h * patch || width > self.grid_w * patch {
            return Err(Error::invalid(format!(
                "cannot upsample {}x{} by patch {patch} to {height}x{width}",
                self.grid_h, self.grid_w
            )));
        }
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(self.get(y / patch, x / patch));
            }
        }
        Mask::new(height, width, bits)
    }
}

/// `mask_i = score_i > t`.
pub fn binarize(scores: &ScoreField, t: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("threshold {t} outside [0, 1]")));
    }
    let bits = scores
        .scores
        .iter()
        .map(|&s| s.partial_cmp(&t) == Some(Ordering::Greater))
        .collect();
    Mask::new(scores.grid_h, scores.grid_w, bits)
}
