//! Gaussian center-prior label assignment.
//!
//! A location is a positive of the gt whose prior `exp(-d^2 / (2 sigma^2))`
//! is highest there, provided the prior exceeds a threshold and the gt's size
//! falls in the level's range. `d` is the distance from the location to the
//! gt center and `sigma = max(sigma_scale * side, 0.5 * stride)`. Every gt
//! then claims at least its nearest location so no positive set is empty.

use serde::{Deserialize, Serialize};

use super::model::GridLevel;
use crate::annotations::BoundingBox;
use crate::error::{Error, Result};
use crate::tls::SampleKey;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    pub threshold: f64,
    pub sigma_scale: f64,
    /// Inclusive `[lo, hi]` range of gt side length handled by each level.
    pub level_side_ranges: Vec<[f64; 2]>,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            threshold: 0.35,
            sigma_scale: 0.5,
            level_side_ranges: vec![[0.0, 10.0], [8.0, 1e9]],
        }
    }
}

impl AssignConfig {
    pub fn validate(&self, num_levels: usize) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "assign threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if !(self.sigma_scale > 0.0) {
            return Err(Error::Config("sigma_scale must be positive".into()));
        }
        if self.level_side_ranges.len() != num_levels {
            return Err(Error::Config(format!(
                "expected {num_levels} level size ranges, got {}",
                self.level_side_ranges.len()
            )));
        }
        if self.level_side_ranges.iter().any(|[lo, hi]| !(lo <= hi)) {
            return Err(Error::Config("level size range with lo > hi".into()));
        }
        Ok(())
    }
}

/// Per-level, per-location owner gt (`None` = negative).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub levels: Vec<Vec<Option<usize>>>,
}

impl Assignment {
    /// Positive locations of every gt, in key order.
    pub fn positives(&self, grids: &[GridLevel], num_gts: usize) -> Vec<Vec<SampleKey>> {
        let mut pos = vec![Vec::new(); num_gts];
        for (l, (owners, grid)) in self.levels.iter().zip(grids).enumerate() {
            for (idx, owner) in owners.iter().enumerate() {
                if let Some(g) = owner {
                    pos[*g].push(SampleKey::new(
                        l as u32,
                        (idx / grid.grid_w) as u32,
                        (idx % grid.grid_w) as u32,
                    ));
                }
            }
        }
        pos
    }

    pub fn num_positives(&self) -> usize {
        self.levels.iter().flatten().filter(|o| o.is_some()).count()
    }
}

/// Gaussian prior of `gt` at a location.
pub fn gaussian_prior(gt: &BoundingBox, stride: u32, sigma_scale: f64, x: f64, y: f64) -> f64 {
    let sigma = (sigma_scale * gt.side()).max(0.5 * stride as f64);
    let d2 = (x - gt.cx).powi(2) + (y - gt.cy).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn eligible(cfg: &AssignConfig, level: usize, gt: &BoundingBox) -> bool {
    let [lo, hi] = cfg.level_side_ranges[level];
    let side = gt.side();
    side >= lo && side <= hi
}

/// Assigns grid locations to gts. `grids` must not be empty.
pub fn assign_samples(gts: &[BoundingBox], grids: &[GridLevel], cfg: &AssignConfig) -> Assignment {
    assert!(grids.iter().any(|g| !g.is_empty()), "empty grid");
    let mut levels: Vec<Vec<Option<usize>>> = grids.iter().map(|g| vec![None; g.len()]).collect();
    let mut best: Vec<Vec<f64>> = grids.iter().map(|g| vec![0.0; g.len()]).collect();

    for (l, grid) in grids.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            if !eligible(cfg, l, gt) {
                continue;
            }
            for gy in 0..grid.grid_h {
                for gx in 0..grid.grid_w {
                    let (x, y) = grid.center(gy, gx);
                    let prior = gaussian_prior(gt, grid.stride, cfg.sigma_scale, x, y);
                    let idx = gy * grid.grid_w + gx;
                    // Strict comparison: ties keep the lower gt index.
                    if prior > cfg.threshold && prior > best[l][idx] {
                        best[l][idx] = prior;
                        levels[l][idx] = Some(g);
                    }
                }
            }
        }
    }

    // Totality: a gt without positives takes its nearest location that is
    // not the only positive of another gt.
    let mut counts = vec![0usize; gts.len()];
    for owner in levels.iter().flatten().flatten() {
        counts[*owner] += 1;
    }
    for (g, gt) in gts.iter().enumerate() {
        if counts[g] > 0 {
            continue;
        }
        let mut candidates: Vec<(bool, f64, usize, usize)> = Vec::new();
        for (l, grid) in grids.iter().enumerate() {
            let preferred = eligible(cfg, l, gt);
            for gy in 0..grid.grid_h {
                for gx in 0..grid.grid_w {
                    let (x, y) = grid.center(gy, gx);
                    let d2 = (x - gt.cx).powi(2) + (y - gt.cy).powi(2);
                    candidates.push((!preferred, d2, l, gy * grid.grid_w + gx));
                }
            }
        }
        candidates.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        for (_, _, l, idx) in candidates {
            match levels[l][idx] {
                Some(other) if counts[other] <= 1 => continue,
                Some(other) => counts[other] -= 1,
                None => {}
            }
            levels[l][idx] = Some(g);
            counts[g] = 1;
            break;
        }
    }
    Assignment { levels }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grids() -> Vec<GridLevel> {
        vec![
            GridLevel {
                stride: 4,
                grid_h: 8,
                grid_w: 8,
            },
            GridLevel {
                stride: 8,
                grid_h: 4,
                grid_w: 4,
            },
        ]
    }

    #[test]
    fn single_gt_gets_its_nearest_location() {
        let gt = BoundingBox::new(14.0, 18.0, 6.0, 6.0);
        let a = assign_samples(&[gt], &grids(), &AssignConfig::default());
        let pos = &a.positives(&grids(), 1)[0];
        assert!(pos.contains(&SampleKey::new(0, 4, 3)));
        assert!(!pos.is_empty());
    }

    #[test]
    fn tiny_gt_off_grid_is_still_assigned() {
        // High threshold leaves no prior-based positives.
        let cfg = AssignConfig {
            threshold: 0.99,
            ..AssignConfig::default()
        };
        let gt = BoundingBox::new(17.0, 17.0, 2.0, 2.0);
        let a = assign_samples(&[gt], &grids(), &cfg);
        assert_eq!(a.positives(&grids(), 1)[0], vec![SampleKey::new(0, 4, 4)]);
    }

    #[test]
    fn distant_gts_have_disjoint_positives() {
        let gts = [
            BoundingBox::new(6.0, 6.0, 6.0, 6.0),
            BoundingBox::new(26.0, 26.0, 6.0, 6.0),
        ];
        let a = assign_samples(&gts, &grids(), &AssignConfig::default());
        let pos = a.positives(&grids(), 2);
        assert!(!pos[0].is_empty() && !pos[1].is_empty());
        assert!(pos[0].iter().all(|k| !pos[1].contains(k)));
    }

    #[test]
    fn overlap_goes_to_higher_prior_and_ties_to_lower_index() {
        let g = &grids()[..1];
        // Location (gy=2, gx=2) has center (10, 10).
        let near = BoundingBox::new(11.0, 10.0, 6.0, 6.0);
        let far = BoundingBox::new(12.5, 10.0, 6.0, 6.0);
        let cfg = AssignConfig {
            level_side_ranges: vec![[0.0, 10.0]],
            ..AssignConfig::default()
        };
        let p_near = (-1.0f64 / 18.0).exp();
        let p_far = (-6.25f64 / 18.0).exp();
        assert!((gaussian_prior(&near, 4, 0.5, 10.0, 10.0) - p_near).abs() < 1e-15);
        assert!((gaussian_prior(&far, 4, 0.5, 10.0, 10.0) - p_far).abs() < 1e-15);
        let a = assign_samples(&[far, near], g, &cfg);
        assert_eq!(a.levels[0][2 * 8 + 2], Some(1));
        // Mirror images around x = 10 give equal priors.
        let left = BoundingBox::new(9.0, 10.0, 6.0, 6.0);
        let right = BoundingBox::new(11.0, 10.0, 6.0, 6.0);
        let a = assign_samples(&[right, left], g, &cfg);
        assert_eq!(a.levels[0][2 * 8 + 2], Some(0));
    }

    #[test]
    fn coincident_gts_both_keep_a_positive() {
        let b = BoundingBox::new(10.0, 10.0, 3.0, 3.0);
        let cfg = AssignConfig {
            threshold: 0.99,
            ..AssignConfig::default()
        };
        let a = assign_samples(&[b, b, b], &grids(), &cfg);
        let pos = a.positives(&grids(), 3);
        assert!(pos.iter().all(|p| p.len() == 1));
    }
}
