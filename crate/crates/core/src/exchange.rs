//! Token-grid exchange format and in-memory grid types.
//!
//! A token grid is the `grid_h × grid_w` lattice of patch embeddings an
//! external ViT extractor produces for one image. On disk it is a small
//! little-endian binary file plus a JSON sidecar:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "PANC"
//! 4       4           u32 version (= 1)
//! 8       4           u32 grid_h
//! 12      4           u32 grid_w
//! 16      4           u32 dim
//! 20      1           u8 has_cls (0 or 1)
//! 21      3           reserved, zero
//! 24      4·n·dim     f32 tokens, row-major
//! ..      4·dim       f32 cls (only when has_cls = 1)
//! ```
//!
//! The sidecar lives at `<path>.meta.json` and carries [`ImageMeta`].
//!
//! Payloads stay `f32` in memory so that a write/read cycle is bit-exact;
//! numerical work widens to `f64` via [`TokenGrid::tokens_f64`].

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"PANC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Norm drift accepted as-is.
pub const NORM_EXACT_TOL: f64 = 1e-5;
/// Norm drift silently corrected at load; anything larger is a format error.
pub const NORM_REPAIR_TOL: f64 = 1e-2;

/// Source-image geometry recorded by the producer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    pub source_h: u32,
    pub source_w: u32,
    /// Pixels per patch side.
    pub patch: u32,
    pub backbone_tag: String,
}

impl ImageMeta {
    /// Placeholder metadata for grids without a sidecar: one pixel per token.
    pub fn synthetic(image_id: impl Into<String>, grid_h: usize, grid_w: usize) -> Self {
        ImageMeta {
            image_id: image_id.into(),
            source_h: grid_h as u32,
            source_w: grid_w as u32,
            patch: 1,
            backbone_tag: "unknown".to_string(),
        }
    }
}

/// An image's unit-norm patch embeddings plus optional CLS vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    tokens: Vec<f32>,
    cls: Option<Vec<f32>>,
    meta: ImageMeta,
}

impl TokenGrid {
    /// Builds a grid from raw `f32` payloads, applying the load-time norm rules.
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        mut tokens: Vec<f32>,
        mut cls: Option<Vec<f32>>,
        meta: ImageMeta,
    ) -> Result<Self> {
        let n = grid_h
            .checked_mul(grid_w)
            .ok_or_else(|| FormatError::InvalidHeader("grid size overflows".into()))?;
        if n < 2 {
            return Err(FormatError::InvalidHeader(format!("grid has {n} tokens, need at least 2")).into());
        }
        if dim == 0 {
            return Err(FormatError::InvalidHeader("embedding dimension is zero".into()).into());
        }
        if tokens.len() != n * dim {
            return Err(Error::DimensionMismatch {
                expected: format!("{} token values", n * dim),
                actual: tokens.len().to_string(),
            });
        }
        check_rows(&mut tokens, dim, 0)?;
        if let Some(c) = cls.as_mut() {
            if c.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: format!("cls of length {dim}"),
                    actual: c.len().to_string(),
                });
            }
            check_rows(c, dim, n * dim)?;
        }
        Ok(TokenGrid {
            grid_h,
            grid_w,
            dim,
            tokens,
            cls,
            meta,
        })
    }

    /// Builds a grid from arbitrary (nonzero) `f64` rows, L2-normalizing each.
    pub fn from_rows(
        grid_h: usize,
        grid_w: usize,
        rows: &DMatrix<f64>,
        cls: Option<&[f64]>,
        meta: ImageMeta,
    ) -> Result<Self> {
        if rows.nrows() != grid_h * grid_w {
            return Err(Error::DimensionMismatch {
                expected: format!("{} rows", grid_h * grid_w),
                actual: rows.nrows().to_string(),
            });
        }
        let unit = l2_normalize(rows)?;
        let dim = unit.ncols();
        let mut tokens = Vec::with_capacity(unit.len());
        for r in 0..unit.nrows() {
            tokens.extend(unit.row(r).iter().map(|&x| x as f32));
        }
        let cls = match cls {
            Some(c) => {
                let m = DMatrix::from_row_slice(1, c.len(), c);
                let u = l2_normalize(&m)?;
                Some(u.iter().map(|&x| x as f32).collect())
            }
            None => None,
        };
        TokenGrid::new(grid_h, grid_w, dim, tokens, cls, meta)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    /// Number of tokens, `grid_h · grid_w`.
    pub fn n(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn meta(&self) -> &ImageMeta {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: ImageMeta) {
        self.meta = meta;
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major `n × dim` payload.
    pub fn raw_tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn cls(&self) -> Option<&[f32]> {
        self.cls.as_deref()
    }

    /// Tokens widened to `f64`, one row per token.
    pub fn tokens_f64(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.n(), self.dim, self.tokens.iter().map(|&x| x as f64))
    }

    fn validate_for_write(&self) -> Result<()> {
        if let Some(i) = self.tokens.iter().position(|x| !x.is_finite()) {
            return Err(FormatError::NonFinite { index: i }.into());
        }
        if let Some(c) = &self.cls {
            if let Some(i) = c.iter().position(|x| !x.is_finite()) {
                return Err(FormatError::NonFinite {
                    index: self.tokens.len() + i,
                }
                .into());
            }
        }
        Ok(())
    }
}

/// Enforces finiteness and unit norm on consecutive `dim`-sized rows.
/// `offset` only shifts the indices reported in errors.
pub(crate) fn check_rows(data: &mut [f32], dim: usize, offset: usize) -> Result<()> {
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(FormatError::NonFinite { index: offset + i }.into());
    }
    for (r, row) in data.chunks_mut(dim).enumerate() {
        let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        let drift = (norm - 1.0).abs();
        if drift <= NORM_EXACT_TOL {
            continue;
        }
        if drift < NORM_REPAIR_TOL {
            for x in row.iter_mut() {
                *x = ((*x as f64) / norm) as f32;
            }
        } else {
            return Err(FormatError::NormDeviation {
                row: offset / dim + r,
                norm,
            }
            .into());
        }
    }
    Ok(())
}

/// Scales every row to unit L2 norm.
pub fn l2_normalize(vectors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = vectors.clone();
    for (r, mut row) in out.row_iter_mut().enumerate() {
        let norm = row.norm();
        if !(norm > 1e-12) {
            return Err(Error::DegenerateVector { row: r });
        }
        row /= norm;
    }
    Ok(out)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Serializes the binary payload (header + tokens + cls).
pub fn encode_token_grid(grid: &TokenGrid) -> Result<Vec<u8>> {
    grid.validate_for_write()?;
    let cls_len = grid.cls.as_ref().map_or(0, |c| c.len());
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * (grid.tokens.len() + cls_len));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(grid.grid_h as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.grid_w as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.dim as u32).to_le_bytes());
    buf.push(u8::from(grid.cls.is_some()));
    buf.extend_from_slice(&[0u8; 3]);
    for x in &grid.tokens {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(c) = &grid.cls {
        for x in c {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Parses a binary payload; metadata comes from the caller.
pub fn decode_token_grid(bytes: &[u8], meta: ImageMeta) -> Result<TokenGrid> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        }
        .into());
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let grid_h = word(8) as usize;
    let grid_w = word(12) as usize;
    let dim = word(16) as usize;
    let has_cls = match bytes[20] {
        0 => false,
        1 => true,
        b => return Err(FormatError::InvalidHeader(format!("has_cls byte is {b}")).into()),
    };
    if bytes[21..24] != [0, 0, 0] {
        return Err(FormatError::InvalidHeader("reserved bytes are nonzero".into()).into());
    }
    let values = grid_h
        .checked_mul(grid_w)
        .and_then(|n| n.checked_add(usize::from(has_cls)))
        .and_then(|rows| rows.checked_mul(dim))
        .ok_or_else(|| FormatError::InvalidHeader("payload size overflows".into()))?;
    let expected = values
        .checked_mul(4)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| FormatError::InvalidHeader("payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    let mut floats: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let cls = if has_cls {
        Some(floats.split_off(grid_h * grid_w * dim))
    } else {
        None
    };
    TokenGrid::new(grid_h, grid_w, dim, floats, cls, meta)
}

/// Reads a token-grid file and its sidecar. Without a sidecar the grid gets
/// [`ImageMeta::synthetic`] metadata named after the file stem.
pub fn read_token_grid(path: impl AsRef<Path>) -> Result<TokenGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        Some(serde_json::from_slice::<ImageMeta>(&text).map_err(|e| Error::json(&side, e))?)
    } else {
        None
    };
    let placeholder = ImageMeta::synthetic("", 0, 0);
    let mut grid = decode_token_grid(&bytes, meta.clone().unwrap_or(placeholder))?;
    if meta.is_none() {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        grid.meta = ImageMeta::synthetic(stem, grid.grid_h, grid.grid_w);
    }
    Ok(grid)
}

pub fn write_token_grid(grid: &TokenGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_token_grid(grid)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let meta = serde_json::to_vec_pretty(&grid.meta).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, meta).map_err(|e| Error::io(&side, e))?;
    Ok(())
}
