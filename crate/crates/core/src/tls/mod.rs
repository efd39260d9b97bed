//! Trend-guided learning: per-sample confidence histories, trend-based
//! classification reweighting, and recurrent regeneration of box targets.
//!
//! The registry stores, for every head location of every image, the score it
//! produced in each epoch. Positives are reweighted by a blend of their
//! learning trend (cleanliness) and their share of their gt's total score
//! (primacy); negatives whose score keeps growing are down-weighted. Box
//! targets are re-estimated once per epoch by fusing the original gt, the
//! previous target, and a confidence-weighted ensemble of the top-k
//! predictions.

mod regen;
mod registry;
mod reweight;

pub use regen::{rbr_fuse, select_topk, BoxCandidate, BoxRegenerator, RegeneratedTarget};
pub use registry::{SampleKey, SampleRecord, SampleScore, TrendRegistry};
pub use reweight::{cleanliness, gt_positive_weights, negative_weight, positive_weight, primacy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TlsConfig {
    /// Balance between cleanliness and primacy for positive weights.
    pub alpha: f64,
    /// Predictions per gt fused into the regenerated target.
    pub k: usize,
    /// Weight of the original (noisy) gt in the fusion.
    pub w1: f64,
    /// How each gt's positive weights are scaled before use.
    pub positive_scale: PositiveScale,
}

/// Scaling applied to the positive weights of one gt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveScale {
    /// Use `alpha * c + (1 - alpha) * r` as is.
    Raw,
    /// Divide by the largest weight of the gt, so its strongest positive
    /// keeps full weight.
    #[default]
    Max,
}

impl PositiveScale {
    pub fn apply(self, weights: &mut [f64]) {
        if self == PositiveScale::Max {
            let top = weights.iter().copied().fold(0.0, f64::max);
            if top > 0.0 {
                weights.iter_mut().for_each(|w| *w /= top);
            }
        }
    }
}

impl Default for TlsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            k: 4,
            w1: 1.0,
            positive_scale: PositiveScale::Max,
        }
    }
}

impl TlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.k == 0 {
            return Err(Error::Config("top-k must be >= 1".into()));
        }
        if !(self.w1 > 0.0 && self.w1.is_finite()) {
            return Err(Error::Config(format!("w1 must be > 0, got {}", self.w1)));
        }
        Ok(())
    }
}
