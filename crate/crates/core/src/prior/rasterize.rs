use crate::error::{Error, Result};
use crate::exchange::TokenGrid;

use super::Label;

/// A dense binary annotation at source-image resolution, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
}

impl BinaryImage {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{} pixels", height * width),
                actual: pixels.len().to_string(),
            });
        }
        Ok(BinaryImage {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        BinaryImage {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.pixels[y * self.width + x] = value;
    }
}

/// Labels every token by its patch's overlap with `mask`: positive iff strictly
/// more than half of the `patch × patch` pixels are set. Pixels outside the
/// source frame (padding) count as unset.
pub fn tokens_from_mask(grid: &TokenGrid, mask: &BinaryImage) -> Result<Vec<(usize, Label)>> {
    let meta = grid.meta();
    if mask.height != meta.source_h as usize || mask.width != meta.source_w as usize {
        return Err(Error::DimensionMismatch {
            expected: format!("mask of {}x{}", meta.source_h, meta.source_w),
            actual: format!("{}x{}", mask.height, mask.width),
        });
    }
    let p = meta.patch as usize;
    if p == 0 {
        return Err(Error::invalid("patch size is zero"));
    }
    let area = p * p;
    let mut out = Vec::with_capacity(grid.n());
    for r in 0..grid.grid_h() {
        for c in 0..grid.grid_w() {
            let mut hits = 0usize;
            for y in r * p..((r + 1) * p).min(mask.height) {
                for x in c * p..((c + 1) * p).min(mask.width) {
                    hits += usize::from(mask.get(y, x));
                }
            }
            let label = if 2 * hits > area {
                Label::Positive
            } else {
                Label::Negative
            };
            out.push((r * grid.grid_w() + c, label));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exchange::ImageMeta;
    use nalgebra::DMatrix;

    fn grid_2x2_patch4() -> TokenGrid {
        let rows = DMatrix::from_fn(4, 3, |r, c| if r % 3 == c { 1.0 } else { 0.1 });
        let meta = ImageMeta {
            image_id: "m".into(),
            source_h: 8,
            source_w: 8,
            patch: 4,
            backbone_tag: "t".into(),
        };
        TokenGrid::from_rows(2, 2, &rows, None, meta).unwrap()
    }

    #[test]
    fn full_patch_is_positive() {
        let g = grid_2x2_patch4();
        let mut m = BinaryImage::filled(8, 8, false);
        for y in 0..4 {
            for x in 0..4 {
                m.set(y, x, true);
            }
        }
        let labels = tokens_from_mask(&g, &m).unwrap();
        assert_eq!(labels[0], (0, Label::Positive));
        assert!(labels[1..].iter().all(|&(_, l)| l == Label::Negative));
    }

    #[test]
    fn exactly_half_is_negative() {
        let g = grid_2x2_patch4();
        let mut m = BinaryImage::filled(8, 8, false);
        // top-left patch: 8 of 16 pixels set
        for y in 0..2 {
            for x in 0..4 {
                m.set(y, x, true);
            }
        }
        // top-right patch: 9 of 16 pixels set
        for y in 0..2 {
            for x in 4..8 {
                m.set(y, x, true);
            }
        }
        m.set(2, 4, true);
        let labels = tokens_from_mask(&g, &m).unwrap();
        assert_eq!(labels[0].1, Label::Negative);
        assert_eq!(labels[1].1, Label::Positive);
    }

    #[test]
    fn empty_mask_all_negative() {
        let g = grid_2x2_patch4();
        let labels = tokens_from_mask(&g, &BinaryImage::filled(8, 8, false)).unwrap();
        assert_eq!(labels.len(), 4);
        assert!(labels.iter().all(|&(_, l)| l == Label::Negative));
    }

    #[test]
    fn wrong_mask_size_rejected() {
        let g = grid_2x2_patch4();
        assert!(matches!(
            tokens_from_mask(&g, &BinaryImage::filled(8, 7, true)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn padding_counts_as_background() {
        // 6x6 source inside an 8x8 padded frame: bottom-right patch has 4 of 16 real pixels.
        let rows = DMatrix::from_fn(4, 2, |r, c| (r + c + 1) as f64);
        let meta = ImageMeta {
            image_id: "p".into(),
            source_h: 6,
            source_w: 6,
            patch: 4,
            backbone_tag: "t".into(),
        };
        let g = TokenGrid::from_rows(2, 2, &rows, None, meta).unwrap();
        let labels = tokens_from_mask(&g, &BinaryImage::filled(6, 6, true)).unwrap();
        assert_eq!(
            labels.iter().map(|l| l.1).collect::<Vec<_>>(),
            vec![Label::Positive, Label::Negative, Label::Negative, Label::Negative]
        );
    }
}
