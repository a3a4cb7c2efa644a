//! Checkpoint-ensemble uncertainty quantification for image segmentation.
//!
//! A single training run with warm-restart learning-rate cycles visits
//! several minima. Checkpoints taken at the validation peaks of those cycles
//! form an ensemble whose averaged posterior yields per-pixel entropy maps
//! and per-class uncertainty scores, evaluated with Dice and expected
//! calibration error.
//!
//! The stages, in pipeline order:
//!
//! - [`schedule`]: cosine annealing with warm restarts.
//! - [`select`]: checkpoint choice at per-cycle validation peaks.
//! - [`ensemble`]: posterior averaging and argmax segmentation.
//! - [`uncertainty`] and [`morphology`]: entropy maps and contour-normalized
//!   scores.
//! - [`metrics`]: Dice, ECE, rank correlation.
//! - [`toy`]: a small synthetic dataset and trainer that exercise the rest.
//! - [`pipeline`]: file-based orchestration behind the `uqseg` binary.

pub mod ensemble;
pub mod error;
pub mod format;
pub mod metrics;
pub mod morphology;
pub mod numfmt;
pub mod pipeline;
pub mod report;
pub mod schedule;
pub mod select;
pub mod toy;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{
    zscore_normalize, Axial, BinaryImage, IntensityVolume, LabelVolume, ProbabilityVolume,
    SliceShape, VolumeShape,
};
