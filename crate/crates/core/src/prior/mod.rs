//! Labeled prior bank: construction, persistence, and per-image retrieval.

mod kmeans;
mod rasterize;
mod select;

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::exchange::{check_rows, TokenGrid};

pub use kmeans::{build_representatives, kmeans, KMeans, RepresentativeSet};
pub use rasterize::{tokens_from_mask, BinaryImage};
pub use select::{score_relevance, select_priors, PriorSelection, RetrievalConfig, SelectionMode};

pub const BANK_META_FILE: &str = "bank.meta.json";
pub const BANK_EMBED_FILE: &str = "bank.embed.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Positive => f.write_str("positive"),
            Label::Negative => f.write_str("negative"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorEntry {
    pub embedding: Vec<f32>,
    pub label: Label,
    pub source_image: String,
    pub token_index: usize,
}

impl PriorEntry {
    /// Copies token `token_index` of `grid` into a bank entry.
    pub fn from_grid(grid: &TokenGrid, token_index: usize, label: Label) -> Result<Self> {
        if token_index >= grid.n() {
            return Err(Error::invalid(format!(
                "token index {token_index} out of range for a grid of {} tokens",
                grid.n()
            )));
        }
        Ok(PriorEntry {
            embedding: grid.token(token_index).to_vec(),
            label,
            source_image: grid.meta().image_id.clone(),
            token_index,
        })
    }
}

/// Labeled exemplar token embeddings. Always holds both labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBank {
    entries: Vec<PriorEntry>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    dim: usize,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    source_image: String,
    token_index: usize,
    label: Label,
}

impl PriorBank {
    pub fn new(mut entries: Vec<PriorEntry>, dim: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("prior bank"));
        }
        for (i, e) in entries.iter_mut().enumerate() {
            if e.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: format!("bank embedding of dimension {dim}"),
                    actual: format!("entry {i} has {}", e.embedding.len()),
                });
            }
            check_rows(&mut e.embedding, dim, i * dim)?;
        }
        for label in [Label::Positive, Label::Negative] {
            if !entries.iter().any(|e| e.label == label) {
                return Err(Error::MissingLabel(label));
            }
        }
        Ok(PriorBank { entries, dim })
    }

    /// Builds bank entries from every labeled token of a grid.
    pub fn entries_from_labels(grid: &TokenGrid, labels: &[(usize, Label)]) -> Result<Vec<PriorEntry>> {
        labels
            .iter()
            .map(|&(i, l)| PriorEntry::from_grid(grid, i, l))
            .collect()
    }

    pub fn entries(&self) -> &[PriorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Bank indices carrying `label`, ascending.
    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Embeddings of the given entries widened to `f64`, one row each.
    pub fn embeddings_f64(&self, indices: &[usize]) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            indices.len(),
            self.dim,
            indices
                .iter()
                .flat_map(|&i| self.entries[i].embedding.iter().map(|&x| x as f64)),
        )
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = BankManifest {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    source_image: e.source_image.clone(),
                    token_index: e.token_index,
                    label: e.label,
                })
                .collect(),
        };
        let meta_path = dir.join(BANK_META_FILE);
        let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&meta_path, e))?;
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

        let mut blob = Vec::with_capacity(4 * self.dim * self.entries.len());
        for e in &self.entries {
            for x in &e.embedding {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let embed_path = dir.join(BANK_EMBED_FILE);
        fs::write(&embed_path, blob).map_err(|e| Error::io(&embed_path, e))?;
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(BANK_META_FILE);
        let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let manifest: BankManifest =
            serde_json::from_slice(&text).map_err(|e| Error::json(&meta_path, e))?;
        let embed_path = dir.join(BANK_EMBED_FILE);
        let blob = fs::read(&embed_path).map_err(|e| Error::io(&embed_path, e))?;
        let expected = 4 * manifest.dim * manifest.entries.len();
        if blob.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                actual: blob.len(),
            }
            .into());
        }
        if blob.len() > expected {
            return Err(FormatError::TrailingBytes {
                expected,
                actual: blob.len(),
            }
            .into());
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let entries = manifest
            .entries
            .into_iter()
            .zip(floats.chunks(manifest.dim.max(1)))
            .map(|(m, emb)| PriorEntry {
                embedding: emb.to_vec(),
                label: m.label,
                source_image: m.source_image,
                token_index: m.token_index,
            })
            .collect();
        PriorBank::new(entries, manifest.dim)
    }
}
