//! COCO-style average precision with 101-point interpolation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotations::{BoundingBox, DetDataset};
use crate::error::{Error, Result};
use crate::toydet::Detection;

/// Upper side-length bounds of the very-tiny, tiny and small buckets.
pub const SIZE_BUCKETS: [(&str, f64, f64); 4] = [
    ("vt", 0.0, 8.0),
    ("t", 8.0, 16.0),
    ("s", 16.0, 32.0),
    ("m", 32.0, f64::INFINITY),
];

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Detections keyed by image id.
pub type DetectionSet = BTreeMap<u64, Vec<Detection>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean over the requested IoU thresholds.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when the bucket has neither gts nor detections.
    pub ap_vt: Option<f64>,
    pub ap_t: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    /// Threshold-averaged AP per class; `None` for excluded classes.
    pub per_class: Vec<Option<f64>>,
}

/// One class-level matching problem: per image, gts and detections.
struct ClassData<'a> {
    gts: BTreeMap<u64, Vec<&'a BoundingBox>>,
    dets: Vec<(u64, &'a Detection)>,
}

/// AP from a score-sorted TP/FP sequence (ignored detections removed).
pub fn interpolated_ap(tp: &[bool], num_gts: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gts as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let i = recall.partition_point(|&x| x < r);
        if i < precision.len() {
            sum += precision[i];
        }
    }
    sum / 101.0
}

fn in_range(b: &BoundingBox, range: (f64, f64)) -> bool {
    let s = b.side();
    (s > range.0 || range.0 == 0.0) && s <= range.1
}

/// AP of one class at one threshold, COCO-style: gts outside `range` are
/// ignored, as are detections matched to them or unmatched and outside it.
/// Returns `None` when there are no gts and no (non-ignored) detections.
fn class_ap(data: &ClassData, iou_threshold: f64, range: (f64, f64)) -> Option<f64> {
    let mut num_gts = 0usize;
    let mut per_image: BTreeMap<u64, (Vec<&BoundingBox>, Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for (&img, gts) in &data.gts {
        // Non-ignored gts first.
        let mut sorted: Vec<(&BoundingBox, bool)> = gts.iter().map(|g| (*g, !in_range(g, range))).collect();
        sorted.sort_by_key(|(_, ignored)| *ignored);
        num_gts += sorted.iter().filter(|(_, ig)| !ig).count();
        let n = sorted.len();
        per_image.insert(
            img,
            (
                sorted.iter().map(|(g, _)| *g).collect(),
                sorted.iter().map(|(_, ig)| *ig).collect(),
                vec![false; n],
            ),
        );
    }
    let thr = iou_threshold.min(1.0 - 1e-10);
    let mut tp = Vec::with_capacity(data.dets.len());
    for (img, det) in &data.dets {
        let mut best: Option<usize> = None;
        let mut best_iou = thr;
        if let Some((gts, ignored, matched)) = per_image.get(img) {
            for (gi, g) in gts.iter().enumerate() {
                if matched[gi] {
                    continue;
                }
                if best.is_some_and(|m| !ignored[m]) && ignored[gi] {
                    break;
                }
                let iou = det.bbox.iou(g);
                if iou < best_iou {
                    continue;
                }
                best_iou = iou;
                best = Some(gi);
            }
        }
        match best {
            Some(m) => {
                let (_, ignored, matched) = per_image.get_mut(img).expect("matched image exists");
                matched[m] = true;
                if !ignored[m] {
                    tp.push(true);
                }
            }
            None => {
                if in_range(&det.bbox, range) {
                    tp.push(false);
                }
            }
        }
    }
    if num_gts == 0 {
        return if tp.is_empty() { None } else { Some(0.0) };
    }
    Some(interpolated_ap(&tp, num_gts))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Class-mean AP at each threshold, averaged over thresholds. Also returns
/// the per-class threshold means.
fn mean_ap(classes: &[ClassData], thresholds: &[f64], range: (f64, f64)) -> (Option<f64>, Vec<Option<f64>>) {
    let table: Vec<Vec<Option<f64>>> = classes
        .iter()
        .map(|c| thresholds.iter().map(|&t| class_ap(c, t, range)).collect())
        .collect();
    let per_threshold: Vec<Option<f64>> = (0..thresholds.len())
        .map(|ti| mean(table.iter().filter_map(|row| row[ti])))
        .collect();
    let overall = mean(per_threshold.iter().flatten().copied());
    let per_class = table.iter().map(|row| mean(row.iter().flatten().copied())).collect();
    (overall, per_class)
}

/// Evaluates `detections` against clean ground truth.
///
/// Detections are sorted internally (score descending, then image id, then
/// box), so the result does not depend on input order. Matching is greedy
/// from the highest score, one detection per gt, and detections are never
/// deduplicated.
pub fn compute_ap(detections: &DetectionSet, clean: &DetDataset, iou_thresholds: &[f64]) -> Result<EvalResult> {
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config(
            "IoU thresholds must be a non-empty subset of [0, 1]".into(),
        ));
    }
    let c = clean.num_classes();
    for (img, dets) in detections {
        if clean.image(*img).is_none() {
            return Err(Error::Mismatch(format!("detections for unknown image {img}")));
        }
        if let Some(d) = dets.iter().find(|d| d.class_id >= c) {
            return Err(Error::Mismatch(format!("detection class {} out of range", d.class_id)));
        }
    }
    let mut classes: Vec<ClassData> = (0..c)
        .map(|_| ClassData {
            gts: BTreeMap::new(),
            dets: Vec::new(),
        })
        .collect();
    for a in clean.annotations() {
        classes[a.class_id].gts.entry(a.image_id).or_default().push(&a.bbox);
    }
    for (img, dets) in detections {
        for d in dets {
            classes[d.class_id].dets.push((*img, d));
        }
    }
    for cd in &mut classes {
        cd.dets.sort_by(|(ia, a), (ib, b)| {
            b.score.total_cmp(&a.score).then(ia.cmp(ib)).then_with(|| {
                a.bbox
                    .to_array()
                    .iter()
                    .zip(b.bbox.to_array())
                    .map(|(x, y)| x.total_cmp(&y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
    }
    let all = (0.0, f64::INFINITY);
    let (map, per_class) = mean_ap(&classes, iou_thresholds, all);
    let ap_at = |t: f64| mean_ap(&classes, &[t], all).0.unwrap_or(0.0);
    let coco = coco_thresholds();
    let bucket = |i: usize| mean_ap(&classes, &coco, (SIZE_BUCKETS[i].1, SIZE_BUCKETS[i].2)).0;
    Ok(EvalResult {
        map: map.unwrap_or(0.0),
        ap50: ap_at(0.5),
        ap75: ap_at(0.75),
        ap_vt: bucket(0),
        ap_t: bucket(1),
        ap_s: bucket(2),
        ap_m: bucket(3),
        per_class,
    })
}

/// [`compute_ap`] over IoU 0.50:0.05:0.95.
pub fn evaluate(detections: &DetectionSet, clean: &DetDataset) -> Result<EvalResult> {
    compute_ap(detections, clean, &coco_thresholds())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{Annotation, Category, ImageInfo, Provenance};

    fn dataset(boxes: &[(u64, BoundingBox, usize)]) -> DetDataset {
        let cats = (0..2)
            .map(|i| Category {
                id: i,
                name: format!("c{i}"),
            })
            .collect();
        let imgs = (0..3)
            .map(|i| ImageInfo {
                id: i,
                width: 64,
                height: 64,
                file_name: format!("{i}"),
            })
            .collect();
        let anns = boxes
            .iter()
            .enumerate()
            .map(|(i, &(img, bbox, class_id))| Annotation {
                id: i as u64,
                image_id: img,
                bbox,
                class_id,
                provenance: Provenance::Clean,
            })
            .collect();
        DetDataset::new(cats, imgs, anns).unwrap()
    }

    #[test]
    fn single_perfect_detection() {
        let g = BoundingBox::new(20.0, 20.0, 10.0, 10.0);
        let ds = dataset(&[(0, g, 0)]);
        let d = BoundingBox::new(20.5, 20.0, 10.0, 10.0);
        assert!(g.iou(&d) > 0.9);
        let dets = DetectionSet::from([(
            0,
            vec![Detection {
                bbox: d,
                class_id: 0,
                score: 0.9,
            }],
        )]);
        let r = evaluate(&dets, &ds).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.per_class[1], None);
        // IoU 95/105 misses only the 0.95 threshold
        assert!((r.ap_t.unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(r.ap_vt, None);
    }

    #[test]
    fn no_detections_scores_zero() {
        let ds = dataset(&[(0, BoundingBox::new(20.0, 20.0, 10.0, 10.0), 0)]);
        let r = evaluate(&DetectionSet::new(), &ds).unwrap();
        assert_eq!((r.map, r.ap50), (0.0, 0.0));
    }

    #[test]
    fn detections_of_a_class_without_gts_score_zero() {
        let g = BoundingBox::new(20.0, 20.0, 10.0, 10.0);
        let ds = dataset(&[(0, g, 0)]);
        let dets = DetectionSet::from([(
            0,
            vec![
                Detection {
                    bbox: g,
                    class_id: 0,
                    score: 0.9,
                },
                Detection {
                    bbox: g,
                    class_id: 1,
                    score: 0.9,
                },
            ],
        )]);
        let r = evaluate(&dets, &ds).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(0.0)]);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn interpolation_hand_case() {
        // TP, FP, TP with 2 gts: precision 1, 1/2, 2/3 -> envelope 1, 2/3, 2/3.
        let ap = interpolated_ap(&[true, false, true], 2);
        let want = (51.0 * 1.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((ap - want).abs() < 1e-12);
    }

    #[test]
    fn unknown_image_is_rejected() {
        let ds = dataset(&[]);
        let dets = DetectionSet::from([(9, vec![])]);
        assert!(evaluate(&dets, &ds).is_err());
    }
}
