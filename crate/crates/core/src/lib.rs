//! Tri-planar consensus hippocampus segmentation.
//!
//! Three Extended-2D U-Nets, one per anatomical orientation, each see a
//! target slice stacked with its two neighbours. Their heatmaps are
//! averaged, thresholded and reduced to the two largest 3D connected
//! components. Synthetic phantoms make the whole pipeline trainable and
//! testable on a desktop CPU.

pub mod config;
pub mod consensus;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod labeling;
pub mod loss;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod sampler;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{CropWindow, Grid2, Orientation};
pub use volume::{BinaryMask, Geometry, Grid3, LabeledVolume, ProbabilityVolume, ScalarVolume};
