//! Crowd-scene anomaly detection from short-term particle trajectories.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`flow_io`] ingests dense optical flow (Middlebury `.flo`) or estimates it
//!    from grayscale frames with a Horn–Schunck baseline.
//! 2. [`trajectory`] cuts the sequence into non-overlapping clips and advects one
//!    particle per pixel through each clip.
//! 3. [`descriptor`] partitions the clip's first frame into patches and builds a
//!    polar magnitude/angle histogram of each patch's translated trajectories.
//! 4. [`knn_stat`] retrieves the K most similar histograms under the χ² distance,
//!    fits a Gaussian to their pairwise distances and scores the query by its
//!    joint log tail probability.
//! 5. [`detector`] applies the statistics in temporal and spatial contexts and
//!    grows detections with a two-threshold flood fill.
//!
//! [`evaluation`] provides frame/pixel/event level scoring and ROC analysis, and
//! [`synth`] generates seeded synthetic crowd flows with exact ground truth.

pub mod descriptor;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod flow_io;
pub mod keyvalue;
pub mod knn_stat;
pub mod pipeline;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
