//! Training-data generation for X-ray foreign-object detection.
//!
//! Randomized phantoms are scanned with a simulated cone-beam setup,
//! reconstructed with SIRT, segmented with a global threshold, and the 3D
//! segmentation is virtually projected to obtain a 2D ground-truth mask for
//! every radiograph. Metrics for scoring 2D segmentations and the dataset
//! sampling strategies sit alongside.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod io;
pub mod labeling;
pub mod math;
pub mod phantom;
pub mod rng;
pub mod xray;

pub use error::{Error, Result};
pub mod recon;
pub mod volseg;
pub mod gtproject;
pub mod evalmetrics;
pub mod dataset;
pub mod config;
pub mod pipeline;
pub mod plot;
