//! Deterministic machinery for a one-stage stereo 3D object detector:
//! light-weight cost volumes and their hierarchical fusion, anchors with
//! per-shape depth/orientation priors, training losses with analytic
//! gradients, block-matching disparity supervision, stereo-consistent
//! augmentation, KITTI I/O and average-precision evaluation.

pub mod anchors;
pub mod augment;
pub mod disparity;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod kitti;
pub mod losses;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod stereo;
pub mod synthetic;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
