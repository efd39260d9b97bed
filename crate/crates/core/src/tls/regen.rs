//! Recurrent box regeneration.
//!
//! After every epoch each gt's regression target is replaced by
//!
//! ```text
//! theta_n = (w1 * g + w2 * theta_{n-1} + w3 * b_bar) / (w1 + w2 + w3)
//! b_bar   = sum_j s_j * b_j / sum_j s_j          (top-k predictions)
//! w2 = max_j s_j at epoch n-1,   w3 = max_j s_j at epoch n
//! ```
//!
//! Normalizing by the weight sums keeps the target a convex combination of
//! its sources.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::registry::SampleKey;
use crate::annotations::BoundingBox;

/// A decoded prediction from one positive location of a gt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCandidate {
    pub key: SampleKey,
    pub score: f64,
    pub bbox: BoundingBox,
}

/// The `k` highest-scoring candidates, best first. Ties go to the lower key.
pub fn select_topk(candidates: &[BoxCandidate], k: usize) -> Vec<BoxCandidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.key.cmp(&b.key)));
    sorted.truncate(k);
    sorted
}

/// Fuses the gt, the previous target and the top-k ensemble.
///
/// `w2` is the previous epoch's best top-k score (0 in the first epoch);
/// `w3` is taken from `topk`. An empty `topk` contributes nothing.
pub fn rbr_fuse(gt: &BoundingBox, theta_prev: &BoundingBox, topk: &[BoxCandidate], w1: f64, w2: f64) -> BoundingBox {
    let w3 = topk.iter().map(|c| c.score).fold(0.0, f64::max);
    let ensemble = ensemble_box(topk);
    let g = gt.to_array();
    let t = theta_prev.to_array();
    let mut out = [0.0; 4];
    let total = w1 + w2 + w3;
    for d in 0..4 {
        let b = ensemble.map_or(0.0, |e| e[d]);
        out[d] = (w1 * g[d] + w2 * t[d] + w3 * b) / total;
    }
    BoundingBox::from_array(out)
}

/// Confidence-weighted mean in center/size coordinates.
fn ensemble_box(topk: &[BoxCandidate]) -> Option<[f64; 4]> {
    if topk.is_empty() {
        return None;
    }
    let total: f64 = topk.iter().map(|c| c.score).sum();
    let mut acc = [0.0; 4];
    for c in topk {
        let wt = if total > 0.0 {
            c.score / total
        } else {
            1.0 / topk.len() as f64
        };
        for (a, v) in acc.iter_mut().zip(c.bbox.to_array()) {
            *a += wt * v;
        }
    }
    Some(acc)
}

/// The current regression target of one gt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegeneratedTarget {
    pub gt_index: usize,
    pub bbox: BoundingBox,
    /// Epoch that produced `bbox`; 0 means the original gt.
    pub epoch: u32,
    /// Best top-k score of the epoch that produced `bbox`.
    pub max_score: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct ImageTargets {
    gts: Vec<BoundingBox>,
    targets: Vec<RegeneratedTarget>,
    #[serde(skip)]
    pending: HashMap<usize, Vec<BoxCandidate>>,
}

/// Regenerated targets for a whole dataset, refreshed once per epoch.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BoxRegenerator {
    k: usize,
    w1: f64,
    images: BTreeMap<u64, ImageTargets>,
}

impl BoxRegenerator {
    pub fn new(k: usize, w1: f64) -> Self {
        Self {
            k,
            w1,
            images: BTreeMap::new(),
        }
    }

    /// Registers an image's (possibly noisy) gts as epoch-0 targets.
    pub fn insert_image(&mut self, image_id: u64, gts: Vec<BoundingBox>) {
        let targets = gts
            .iter()
            .enumerate()
            .map(|(i, b)| RegeneratedTarget {
                gt_index: i,
                bbox: *b,
                epoch: 0,
                max_score: 0.0,
            })
            .collect();
        self.images.insert(
            image_id,
            ImageTargets {
                gts,
                targets,
                pending: HashMap::new(),
            },
        );
    }

    /// Current target boxes of one image, by gt index.
    pub fn targets(&self, image_id: u64) -> Option<Vec<BoundingBox>> {
        self.images
            .get(&image_id)
            .map(|t| t.targets.iter().map(|r| r.bbox).collect())
    }

    pub fn target_records(&self, image_id: u64) -> Option<&[RegeneratedTarget]> {
        self.images.get(&image_id).map(|t| t.targets.as_slice())
    }

    /// Stores this epoch's candidates for one gt; fused at `finish_epoch`.
    pub fn collect(&mut self, image_id: u64, gt_index: usize, candidates: Vec<BoxCandidate>) {
        if let Some(t) = self.images.get_mut(&image_id) {
            let top = select_topk(&candidates, self.k);
            t.pending.insert(gt_index, top);
        }
    }

    /// Fuses pending candidates into new targets. Gts without candidates
    /// keep their target; their next `w2` is 0.
    pub fn finish_epoch(&mut self, epoch: u32) {
        let (w1, k) = (self.w1, self.k);
        for t in self.images.values_mut() {
            let mut pending = std::mem::take(&mut t.pending);
            for (i, target) in t.targets.iter_mut().enumerate() {
                match pending.remove(&i) {
                    Some(cands) if !cands.is_empty() => {
                        let top = select_topk(&cands, k);
                        let w3 = top.iter().map(|c| c.score).fold(0.0, f64::max);
                        target.bbox = rbr_fuse(&t.gts[i], &target.bbox, &top, w1, target.max_score);
                        target.epoch = epoch;
                        target.max_score = w3;
                    }
                    _ => target.max_score = 0.0,
                }
            }
        }
    }
}
