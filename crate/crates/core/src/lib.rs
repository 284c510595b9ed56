//! Anchor-augmented normalized-cut segmentation of vision-transformer token grids.
//!
//! A labeled prior bank is sampled per image, the chosen priors join the image
//! tokens as graph vertices, two anchor vertices tie each label together, and
//! the Fiedler vector of the normalized Laplacian is oriented, rescaled and
//! thresholded into a token mask.

pub mod affinity;
pub mod binarize;
pub mod error;
pub mod exchange;
pub mod fixtures;
pub mod metrics;
pub mod pipeline;
pub mod prior;
pub mod spectral;

pub use error::{Error, FormatError, Result};
pub use pipeline::{segment_image, PipelineConfig, Preset, Segmentation};
pub use nalgebra;
