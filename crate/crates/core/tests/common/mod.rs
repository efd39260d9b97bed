#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_tod::annotations::{Annotation, BoundingBox, Category, DetDataset, ImageInfo, Provenance};
use robust_tod::eval::DetectionSet;
use robust_tod::toydet::loss::{LevelPlan, LossPlan};
use robust_tod::toydet::model::grid_levels;
use robust_tod::toydet::{assign_samples, Architecture, AssignConfig, Detection};

pub fn categories(c: usize) -> Vec<Category> {
    (0..c)
        .map(|i| Category {
            id: 10 + i as u64,
            name: format!("class{i}"),
        })
        .collect()
}

/// `images` square images of side `size`, each with `per_image` random
/// boxes whose perturbations (up to 50%) never leave the image.
pub fn random_dataset(images: u64, per_image: u64, classes: usize, size: u32, seed: u64) -> DetDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let infos = (0..images)
        .map(|id| ImageInfo {
            id,
            width: size,
            height: size,
            file_name: format!("img{id}.png"),
        })
        .collect();
    let s = size as f64;
    let mut anns = Vec::new();
    for image_id in 0..images {
        for _ in 0..per_image {
            let w = rng.gen_range(4.0..16.0);
            let h = rng.gen_range(4.0..16.0);
            anns.push(Annotation {
                id: anns.len() as u64,
                image_id,
                bbox: BoundingBox::new(rng.gen_range(20.0..s - 20.0), rng.gen_range(20.0..s - 20.0), w, h),
                class_id: rng.gen_range(0..classes),
                provenance: Provenance::Clean,
            });
        }
    }
    DetDataset::new(categories(classes), infos, anns).unwrap()
}

/// Kolmogorov-Smirnov statistic of `xs` against U(lo, hi).
pub fn ks_uniform(xs: &mut [f64], lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Greedy matching and 101-point interpolated AP for one class, written
/// from scratch: no envelope pass, the precision at recall r is the best
/// precision among all ranks reaching r.
pub fn oracle_ap(ds: &DetDataset, dets: &DetectionSet, class: usize, thr: f64) -> Option<f64> {
    let gts: Vec<(u64, BoundingBox)> = ds
        .annotations()
        .iter()
        .filter(|a| a.class_id == class)
        .map(|a| (a.image_id, a.bbox))
        .collect();
    let mut ranked: Vec<(u64, Detection)> = dets
        .iter()
        .flat_map(|(&img, ds)| ds.iter().filter(|d| d.class_id == class).map(move |d| (img, *d)))
        .collect();
    if gts.is_empty() {
        return (!ranked.is_empty()).then_some(0.0);
    }
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used = vec![false; gts.len()];
    let mut curve = Vec::new();
    let mut hits = 0.0;
    for (k, (img, d)) in ranked.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, (gi, b))| !used[*g] && gi == img && d.bbox.iou(b) >= thr)
            .max_by(|a, b| d.bbox.iou(&a.1 .1).total_cmp(&d.bbox.iou(&b.1 .1)))
            .map(|(g, _)| g);
        if let Some(g) = best {
            used[g] = true;
            hits += 1.0;
        }
        curve.push((hits / gts.len() as f64, hits / (k + 1) as f64));
    }
    let total: f64 = (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / 101.0)
}

pub fn tiny_arch(num_classes: usize) -> Architecture {
    Architecture {
        num_classes,
        widths: [3, 4, 4, 5],
        head_channels: 4,
    }
}

/// Assignment-based plan with uneven positive and negative weights.
pub fn plan_for(gts: &[BoundingBox], classes: &[usize], size: usize) -> LossPlan {
    let grids = grid_levels(size, size);
    let a = assign_samples(gts, &grids, &AssignConfig::default());
    let levels: Vec<LevelPlan> = a
        .levels
        .iter()
        .map(|owners| {
            let mut lp = LevelPlan::negatives(owners.len());
            for (idx, owner) in owners.iter().enumerate() {
                if let Some(g) = owner {
                    lp.class[idx] = Some(classes[*g]);
                    lp.box_target[idx] = Some(gts[*g]);
                    lp.cls_weight[idx] = 0.7;
                } else if idx % 3 == 0 {
                    lp.cls_weight[idx] = 0.4;
                }
            }
            lp
        })
        .collect();
    let normalizer = a.num_positives().max(1) as f64;
    LossPlan { levels, normalizer }
}
