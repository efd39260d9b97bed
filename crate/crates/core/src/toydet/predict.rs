//! Decoding head outputs into final detections.

use serde::{Deserialize, Serialize};

use super::loss::sigmoid;
use super::model::{image_tensor, Detector};
use super::scene::GrayImage;
use crate::annotations::BoundingBox;

pub const SCORE_THRESHOLD: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
pub const MAX_DETECTIONS: usize = 3000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

/// Greedy class-wise non-maximum suppression. Output is score-descending;
/// equal scores keep input order.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Runs the detector on one image and post-processes the outputs.
pub fn predict(model: &Detector<f32>, image: &GrayImage) -> Vec<Detection> {
    predict_with_threshold(model, image, SCORE_THRESHOLD)
}

/// [`predict`] with a custom score floor.
pub fn predict_with_threshold(model: &Detector<f32>, image: &GrayImage, score_threshold: f64) -> Vec<Detection> {
    let (h, w) = (image.height as usize, image.width as usize);
    let (outputs, _) = model.forward(&image_tensor(&image.pixels, h, w));
    let mut dets = Vec::new();
    for out in &outputs {
        let n = out.grid.len();
        for idx in 0..n {
            let mut decoded = None;
            for k in 0..out.cls.c {
                let score = sigmoid(out.logit(k, idx));
                if score <= score_threshold {
                    continue;
                }
                let bbox = *decoded.get_or_insert_with(|| out.decoded(idx).clamp_to_image(w as f64, h as f64).0);
                dets.push(Detection {
                    bbox,
                    class_id: k,
                    score,
                });
            }
        }
    }
    let mut kept = nms(dets, NMS_IOU);
    kept.truncate(MAX_DETECTIONS);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: BoundingBox::new(cx, 10.0, 6.0, 6.0),
            class_id,
            score,
        }
    }

    #[test]
    fn identical_boxes_collapse() {
        let kept = nms(vec![det(10.0, 0.5, 0), det(10.0, 0.9, 0)], 0.5);
        assert_eq!(kept, vec![det(10.0, 0.9, 0)]);
    }

    #[test]
    fn other_classes_are_not_suppressed() {
        let kept = nms(vec![det(10.0, 0.5, 1), det(10.0, 0.9, 0)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    /// Marks every box suppressed by a strictly better-ranked survivor.
    fn nms_brute_force(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let mut alive = vec![true; dets.len()];
        for (r, &i) in order.iter().enumerate() {
            for &j in &order[..r] {
                if alive[j] && dets[j].class_id == dets[i].class_id && dets[j].bbox.iou(&dets[i].bbox) > thr {
                    alive[i] = false;
                    break;
                }
            }
        }
        order.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let dets: Vec<Detection> = (0..50)
                .map(|_| Detection {
                    bbox: BoundingBox::new(
                        rng.gen_range(0.0..30.0),
                        rng.gen_range(0.0..30.0),
                        rng.gen_range(2.0..12.0),
                        rng.gen_range(2.0..12.0),
                    ),
                    class_id: rng.gen_range(0..3),
                    score: rng.gen(),
                })
                .collect();
            assert_eq!(nms(dets.clone(), 0.5), nms_brute_force(&dets, 0.5));
        }
    }
}
