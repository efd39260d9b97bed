use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One head location: feature level and grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub level: u32,
    pub grid_y: u32,
    pub grid_x: u32,
}

impl SampleKey {
    pub fn new(level: u32, grid_y: u32, grid_x: u32) -> Self {
        Self { level, grid_y, grid_x }
    }
}

/// What a forward pass produced for one location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScore {
    pub key: SampleKey,
    /// Gt index for positives, `None` for negatives.
    pub assigned_gt: Option<usize>,
    /// Assigned-class score for positives, max foreground score for negatives.
    pub score: f64,
}

/// Score history of one location. Append-only, one entry per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub key: SampleKey,
    pub assigned_gt: Option<usize>,
    pub history: Vec<(u32, f64)>,
}

impl SampleRecord {
    pub fn score_at(&self, epoch: u32) -> Option<f64> {
        self.history.iter().rev().find(|(e, _)| *e == epoch).map(|(_, s)| *s)
    }
}

#[derive(Clone, Debug, Default)]
struct ImageTrend {
    records: BTreeMap<SampleKey, SampleRecord>,
    last_epoch: Option<u32>,
}

/// Per-image, per-location confidence histories across epochs.
#[derive(Clone, Debug, Default)]
pub struct TrendRegistry {
    images: HashMap<u64, ImageTrend>,
}

impl TrendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends this epoch's score for every sample of one image.
    ///
    /// A location whose assignment changed since its last entry restarts its
    /// history. Writing the same `(image, epoch)` twice is an error.
    pub fn record_epoch(&mut self, image_id: u64, epoch: u32, samples: &[SampleScore]) -> Result<()> {
        let trend = self.images.entry(image_id).or_default();
        if trend.last_epoch.is_some_and(|last| epoch <= last) {
            return Err(Error::DuplicateRecord { image_id, epoch });
        }
        trend.last_epoch = Some(epoch);
        for s in samples {
            let rec = trend.records.entry(s.key).or_insert_with(|| SampleRecord {
                key: s.key,
                assigned_gt: s.assigned_gt,
                history: Vec::new(),
            });
            if rec.assigned_gt != s.assigned_gt {
                rec.assigned_gt = s.assigned_gt;
                rec.history.clear();
            }
            rec.history.push((epoch, s.score));
        }
        Ok(())
    }

    pub fn record(&self, image_id: u64, key: &SampleKey) -> Option<&SampleRecord> {
        self.images.get(&image_id)?.records.get(key)
    }

    /// Score recorded for `key` at `epoch`, if any.
    pub fn score(&self, image_id: u64, key: &SampleKey, epoch: u32) -> Option<f64> {
        self.record(image_id, key)?.score_at(epoch)
    }

    /// All records of one image in key order.
    pub fn image_records(&self, image_id: u64) -> Vec<&SampleRecord> {
        self.images
            .get(&image_id)
            .map(|t| t.records.values().collect())
            .unwrap_or_default()
    }

    pub fn image_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.images.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// JSON-friendly dump: image id -> records.
    pub fn dump(&self) -> BTreeMap<u64, Vec<SampleRecord>> {
        self.images
            .iter()
            .map(|(id, t)| (*id, t.records.values().cloned().collect()))
            .collect()
    }
}
