//! Class-aware label correction.
//!
//! A C x C *dynamic confidence matrix* (DCM) tracks, for every annotated
//! class (row), the running mean prediction vector of its positive samples
//! (columns span the prediction space). Rows are updated once per image by an
//! exponentially weighted moving average with `beta = 1 - 1/T`:
//!
//! ```text
//! v_y <- beta * v_y + (1 - beta) * c_y
//! ```
//!
//! where `c_y` is the image's *confidence pillar* for class `y`. A positive
//! sample with prediction `P` and label `y` is flagged noisy when some class
//! `i` beats the label's own score, the label row's expectation for `i`, and
//! class `i`'s own self-confidence:
//!
//! ```text
//! p_i > p_y  &&  p_i > v[y][i]  &&  p_i > v[i][i]
//! ```
//!
//! Flagged positives get weight 0 in the classification loss once training
//! passes the warm-up fraction; negatives are never filtered.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Period used when none is configured.
pub const DEFAULT_PERIOD: u32 = 100;
/// Filtering starts halfway through training.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicConfidenceMatrix {
    num_classes: usize,
    /// Row-major, `values[y * C + i]`.
    values: Vec<f64>,
    period: u32,
    beta: f64,
    rows_touched: Vec<u64>,
}

impl DynamicConfidenceMatrix {
    /// Identity-initialized matrix: every class initially trusts itself.
    pub fn new(num_classes: usize, period: u32) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "confidence matrix needs at least 2 classes, got {num_classes}"
            )));
        }
        if period == 0 {
            return Err(Error::Config("DCM period T must be >= 1".into()));
        }
        let mut values = vec![0.0; num_classes * num_classes];
        for i in 0..num_classes {
            values[i * num_classes + i] = 1.0;
        }
        Ok(Self {
            num_classes,
            values,
            period,
            beta: 1.0 - 1.0 / period as f64,
            rows_touched: vec![0; num_classes],
        })
    }

    /// Matrix with explicit rows, e.g. restored from a dump.
    pub fn from_rows(rows: &[Vec<f64>], period: u32) -> Result<Self> {
        let mut d = Self::new(rows.len(), period)?;
        let c = rows.len();
        for (y, r) in rows.iter().enumerate() {
            if r.len() != c {
                return Err(Error::Config(format!(
                    "DCM row {y} has {} entries, expected {c}",
                    r.len()
                )));
            }
            d.values[y * c..(y + 1) * c].copy_from_slice(r);
        }
        Ok(d)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn period(&self) -> u32 {
        self.period
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.num_classes + col]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.values[y * self.num_classes..(y + 1) * self.num_classes]
    }

    pub fn rows_touched(&self) -> &[u64] {
        &self.rows_touched
    }

    /// Rows as nested vectors, for dumps and plots.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes).map(|y| self.row(y).to_vec()).collect()
    }

    /// EWMA update of row `pillar.class_y`.
    pub fn update(&mut self, pillar: &ConfidencePillar) {
        assert_eq!(pillar.mean_prediction.len(), self.num_classes);
        let y = pillar.class_y;
        let c = self.num_classes;
        let beta = self.beta;
        for (v, p) in self.values[y * c..(y + 1) * c].iter_mut().zip(&pillar.mean_prediction) {
            *v = beta * *v + (1.0 - beta) * p;
        }
        self.rows_touched[y] += 1;
    }

    /// Updates every row that has positives in one image.
    pub fn update_from_image(&mut self, positives: &[SampleObservation]) {
        for pillar in image_pillars(positives, self.num_classes) {
            self.update(&pillar);
        }
    }
}

/// Mean prediction over the positives of one class in one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePillar {
    pub class_y: usize,
    pub mean_prediction: Vec<f64>,
}

/// Class scores of one positive sample and its annotated class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleObservation {
    /// Independent per-class confidences in `[0, 1]`.
    pub prediction: Vec<f64>,
    pub gt_class: usize,
}

/// Pillar for `class_y`, or `None` when the image has no such positive.
pub fn confidence_pillar(observations: &[SampleObservation], class_y: usize) -> Option<ConfidencePillar> {
    let mut members = observations.iter().filter(|o| o.gt_class == class_y);
    let first = members.next()?;
    let mut sum = first.prediction.clone();
    let mut n = 1usize;
    for o in members {
        for (s, p) in sum.iter_mut().zip(&o.prediction) {
            *s += p;
        }
        n += 1;
    }
    let inv = 1.0 / n as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    Some(ConfidencePillar {
        class_y,
        mean_prediction: sum,
    })
}

/// One pillar per class present among the image's positives, by class id.
pub fn image_pillars(observations: &[SampleObservation], num_classes: usize) -> Vec<ConfidencePillar> {
    let mut present = vec![false; num_classes];
    for o in observations {
        present[o.gt_class] = true;
    }
    (0..num_classes)
        .filter(|&y| present[y])
        .filter_map(|y| confidence_pillar(observations, y))
        .collect()
}

/// 0 if the sample is judged class-shifted, 1 otherwise.
pub fn noisy_factor(obs: &SampleObservation, dcm: &DynamicConfidenceMatrix) -> u8 {
    let y = obs.gt_class;
    let p = &obs.prediction;
    let p_y = p[y];
    let noisy = p
        .iter()
        .enumerate()
        .any(|(i, &p_i)| step(p_i - p_y) && step(p_i - dcm.get(y, i)) && step(p_i - dcm.get(i, i)));
    u8::from(!noisy)
}

/// Strict unit step: true iff `x > 0`.
fn step(x: f64) -> bool {
    x > 0.0
}

/// Per-positive classification-loss weights in `{0, 1}`.
///
/// Before `warmup_fraction` of training has elapsed every weight is 1.
pub fn clc_loss_weights(
    positives: &[SampleObservation],
    dcm: &DynamicConfidenceMatrix,
    progress: f64,
    warmup_fraction: f64,
) -> Vec<f64> {
    if progress < warmup_fraction {
        return vec![1.0; positives.len()];
    }
    positives.iter().map(|o| f64::from(noisy_factor(o, dcm))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClcConfig {
    pub period: u32,
    pub warmup_fraction: f64,
}

impl Default for ClcConfig {
    fn default() -> Self {
        Self {
            period: DEFAULT_PERIOD,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
        }
    }
}

/// DCM plus its filtering schedule, as used by the trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAwareCorrector {
    pub config: ClcConfig,
    pub dcm: DynamicConfidenceMatrix,
    /// Positives seen and positives filtered since construction.
    pub seen: u64,
    pub filtered: u64,
}

impl ClassAwareCorrector {
    pub fn new(num_classes: usize, config: ClcConfig) -> Result<Self> {
        Ok(Self {
            dcm: DynamicConfidenceMatrix::new(num_classes, config.period)?,
            config,
            seen: 0,
            filtered: 0,
        })
    }

    /// Weights from the current matrix state, then the per-image update.
    pub fn process_image(&mut self, positives: &[SampleObservation], progress: f64) -> Vec<f64> {
        let weights = clc_loss_weights(positives, &self.dcm, progress, self.config.warmup_fraction);
        self.seen += positives.len() as u64;
        self.filtered += weights.iter().filter(|&&w| w == 0.0).count() as u64;
        self.dcm.update_from_image(positives);
        weights
    }
}
