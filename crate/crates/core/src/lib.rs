//! Interactive instance segmentation of 3D point clouds.
//!
//! The crate is organised the way a single interactive episode flows:
//!
//! - [`scene_io`]: point clouds, instance labels, PLY and the internal scene
//!   format, the sparse voxel grid and the k-NN graph.
//! - [`clickmap`]: clicks and the two per-point click channels appended to the
//!   point features.
//! - [`annotator`]: the simulated annotator (random training clicks and the
//!   largest-error-region test policy) and the simulated session loop.
//! - [`segmenter`]: the backend interface, the geodesic reference segmenter,
//!   test doubles and the external-process adapter.
//! - [`metrics`]: IoU, NoC@q, IoU@k and class-agnostic instance AP.
//! - [`trace`]: the line-delimited JSON session log.
//! - [`harness`]: dataset-scale evaluation, AP sweeps and replay.

pub mod annotator;
pub mod clickmap;
mod error;
pub mod harness;
pub mod metrics;
pub mod rle;
pub mod scene_io;
pub mod segmenter;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
