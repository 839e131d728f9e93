//! Desk-scale deepfake detector built from two calibrated modules.
//!
//! Module 1 fuses vision-transformer tokens with a CNN feature pyramid
//! through hierarchical dot-product attention. Module 2 concatenates
//! salient-region, edge-map, and depthwise-separable global features.
//! A Platt-calibrated ensemble combines both; Grad-CAM heatmaps explain
//! the second module's decisions. Everything runs on a self-contained
//! f64 tape-autodiff engine.

pub mod backbones;
pub mod calibration;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod gradcheck;
pub mod imageio;
pub mod pipeline;
pub mod report;
pub mod streams;
pub mod tensor;

pub use error::{Error, Result};
