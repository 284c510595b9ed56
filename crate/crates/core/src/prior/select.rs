//! Per-image prior retrieval: relevance scoring and diversity-aware selection.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exchange::TokenGrid;

use super::{Label, PriorBank};

/// Bank rows scored per matrix product; bounds peak memory for large banks.
const RELEVANCE_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Uniform sampling without replacement.
    Random,
    /// Top entries by relevance.
    Nearest,
    /// Relevance prefilter followed by greedy maximum marginal relevance.
    Mmr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Number of best-matching image tokens averaged into a relevance score.
    pub k_sim: usize,
    /// Prefilter pool size per label.
    pub m_prime: usize,
    /// Weight of the redundancy penalty, in `[0, 1]`.
    pub lambda_mmr: f64,
    pub max_per_label: usize,
    pub mode: SelectionMode,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig::with_quota(750)
    }
}

impl RetrievalConfig {
    /// Defaults with the prefilter at four times the per-label quota.
    pub fn with_quota(max_per_label: usize) -> Self {
        RetrievalConfig {
            k_sim: 5,
            m_prime: 4 * max_per_label,
            lambda_mmr: 0.5,
            max_per_label,
            mode: SelectionMode::Mmr,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_sim == 0 {
            return Err(Error::invalid("k_sim must be at least 1"));
        }
        if self.max_per_label == 0 {
            return Err(Error::invalid("max_per_label must be at least 1"));
        }
        if self.m_prime < self.max_per_label {
            return Err(Error::invalid(format!(
                "m_prime ({}) must be at least max_per_label ({})",
                self.m_prime, self.max_per_label
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_mmr) {
            return Err(Error::invalid(format!("lambda_mmr {} outside [0, 1]", self.lambda_mmr)));
        }
        Ok(())
    }
}

/// Bank indices chosen for one image, per label.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSelection {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    /// Relevance of every bank entry (not computed in random mode).
    pub relevance: Option<Vec<f64>>,
    pub positive_shortfall: bool,
    pub negative_shortfall: bool,
}

impl PriorSelection {
    pub fn get(&self, label: Label) -> &[usize] {
        match label {
            Label::Positive => &self.positive,
            Label::Negative => &self.negative,
        }
    }

    pub fn total(&self) -> usize {
        self.positive.len() + self.negative.len()
    }
}

/// Mean of the `k_sim` largest cosine similarities between each bank entry
/// and the grid's tokens.
pub fn score_relevance(bank: &PriorBank, grid: &TokenGrid, k_sim: usize) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::EmptyInput("prior bank"));
    }
    if bank.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("embedding dimension {}", grid.dim()),
            actual: format!("bank dimension {}", bank.dim()),
        });
    }
    if k_sim == 0 || k_sim > grid.n() {
        return Err(Error::invalid(format!(
            "k_sim = {k_sim} must lie in 1..={}",
            grid.n()
        )));
    }
    let tokens_t = grid.tokens_f64().transpose();
    let all: Vec<usize> = (0..bank.len()).collect();
    let mut scores = Vec::with_capacity(bank.len());
    let mut buf = vec![0.0f64; grid.n()];
    for chunk in all.chunks(RELEVANCE_CHUNK) {
        let sims = bank.embeddings_f64(chunk) * &tokens_t;
        for r in 0..sims.nrows() {
            for (slot, &s) in buf.iter_mut().zip(sims.row(r).iter()) {
                *slot = s;
            }
            scores.push(top_k_mean(&mut buf, k_sim).clamp(-1.0, 1.0));
        }
    }
    Ok(scores)
}

/// Mean of the `k` largest values. Summed in descending order so the result
/// does not depend on the input order.
fn top_k_mean(values: &mut [f64], k: usize) -> f64 {
    let desc = |a: &f64, b: &f64| b.total_cmp(a);
    if k < values.len() {
        values.select_nth_unstable_by(k - 1, desc);
    }
    let top = &mut values[..k];
    top.sort_unstable_by(desc);
    top.iter().sum::<f64>() / k as f64
}

/// Pool sorted by relevance, highest first, ties to the lower bank index.
fn by_relevance(pool: &[usize], relevance: &[f64]) -> Vec<usize> {
    let mut sorted = pool.to_vec();
    sorted.sort_by(|&a, &b| match relevance[b].total_cmp(&relevance[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    sorted
}

fn mmr_pick(
    bank: &PriorBank,
    candidates: &[usize],
    relevance: &[f64],
    lambda: f64,
    quota: usize,
) -> Vec<usize> {
    let mut remaining = candidates.to_vec();
    remaining.sort_unstable();
    let emb = bank.embeddings_f64(&remaining);
    let gram = &emb * emb.transpose();
    // Highest similarity to anything already selected; None while nothing is.
    let mut max_sim: Vec<Option<f64>> = vec![None; remaining.len()];
    let mut alive = vec![true; remaining.len()];
    let mut picked = Vec::with_capacity(quota);
    while picked.len() < quota {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &idx) in remaining.iter().enumerate() {
            if !alive[slot] {
                continue;
            }
            let penalty = max_sim[slot].map_or(0.0, |s| lambda * s);
            let score = relevance[idx] - penalty;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((slot, score));
            }
        }
        let Some((slot, _)) = best else { break };
        alive[slot] = false;
        picked.push(remaining[slot]);
        for other in 0..remaining.len() {
            if alive[other] {
                let s = gram[(other, slot)];
                max_sim[other] = Some(max_sim[other].map_or(s, |m| m.max(s)));
            }
        }
    }
    picked
}

/// Chooses a label-balanced subset of the bank for one image.
pub fn select_priors(bank: &PriorBank, grid: &TokenGrid, cfg: &RetrievalConfig) -> Result<PriorSelection> {
    cfg.validate()?;
    let pools = [bank.indices_of(Label::Positive), bank.indices_of(Label::Negative)];
    for (pool, label) in pools.iter().zip([Label::Positive, Label::Negative]) {
        if pool.is_empty() {
            return Err(Error::MissingLabel(label));
        }
    }
    let quota = cfg.max_per_label;
    let (picks, relevance) = match cfg.mode {
        SelectionMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let picks = pools.map(|pool| {
                let take = quota.min(pool.len());
                let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), take)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect();
                chosen.sort_unstable();
                chosen
            });
            (picks, None)
        }
        SelectionMode::Nearest => {
            let relevance = score_relevance(bank, grid, cfg.k_sim)?;
            let picks = pools.map(|pool| {
                let mut sorted = by_relevance(&pool, &relevance);
                sorted.truncate(quota);
                sorted
            });
            (picks, Some(relevance))
        }
        SelectionMode::Mmr => {
            let relevance = score_relevance(bank, grid, cfg.k_sim)?;
            let picks = pools.map(|pool| {
                let mut prefiltered = by_relevance(&pool, &relevance);
                prefiltered.truncate(cfg.m_prime);
                mmr_pick(bank, &prefiltered, &relevance, cfg.lambda_mmr, quota)
            });
            (picks, Some(relevance))
        }
    };
    let [positive, negative] = picks;
    Ok(PriorSelection {
        positive_shortfall: positive.len() < quota,
        negative_shortfall: negative.len() < quota,
        positive,
        negative,
        relevance,
    })
}
