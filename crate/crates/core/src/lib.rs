//! Label-noise synthesis and noise-robust training components for tiny
//! object detection.
//!
//! - [`annotations`]: COCO-style datasets with per-annotation noise provenance.
//! - [`noisegen`]: seeded injection of missing labels, extra labels, class
//!   shifts and box perturbations, plus audit reports.
//! - [`clc`]: class-aware label correction driven by a dynamic confidence
//!   matrix.
//! - [`tls`]: trend-guided sample reweighting and recurrent box regeneration.
//! - [`toydet`]: synthetic tiny-shapes scenes and a small detector to train
//!   the above end to end.
//! - [`eval`]: AP evaluation, noise sweeps and SVG reports.

pub mod annotations;
pub mod clc;
pub mod config;
pub mod error;
pub mod eval;
pub mod noisegen;
pub mod rng;
pub mod tls;
pub mod toydet;

pub use error::{Error, Result};
