//! Reconstruction-based hyperspectral anomaly detection with dual
//! spatial/spectral selective-scan branches and gated fusion.
//!
//! The crate is organized bottom-up:
//!
//! - [`compute`]: tensors, parameters and reverse-mode autodiff
//! - [`ssm`]: the selective-scan recurrence and the block built around it
//! - [`model`]: the dual-branch reconstruction network and checkpoints
//! - [`data`]: cube I/O, normalization and synthetic scenes
//! - [`patching`]: sliding windows, random masking and reassembly
//! - [`training`]: Adam and the reconstruction fit loop
//! - [`detection`]: residual scoring and the RX baseline
//! - [`eval`]: ROC/AUC, box statistics and the scan scaling benchmark
//! - [`config`]: the merged run configuration used by the CLI

pub mod compute;
pub mod config;
pub mod data;
pub mod detection;
pub mod error;
pub mod eval;
pub mod model;
pub mod patching;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};
