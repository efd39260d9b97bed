//! Weighted focal + GIoU loss with closed-form gradients.
//!
//! Sample weights enter as constants: the gradient never flows through the
//! score history or the confidence matrix that produced them.

use serde::{Deserialize, Serialize};

use super::model::{HeadGrads, LevelOutput, MAX_LOG_SCALE};
use super::nn::{Real, Tensor};
use crate::annotations::BoundingBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            reg_weight: 1.0,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss of one logit and its derivative in the logit.
pub fn focal_term(z: f64, target: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if target {
        let ln_p = -softplus(-z);
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * ln_p;
        let grad = alpha * q.powf(gamma) * (gamma * p * ln_p - q);
        (loss, grad)
    } else {
        let ln_q = -softplus(z);
        let loss = -(1.0 - alpha) * p.powf(gamma) * ln_q;
        let grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * ln_q);
        (loss, grad)
    }
}

/// Generalized IoU loss `1 - GIoU` and its gradient with respect to the
/// predicted `(cx, cy, w, h)`.
pub fn giou_loss(pred: &BoundingBox, target: &BoundingBox) -> (f64, [f64; 4]) {
    let [px1, py1, px2, py2] = pred.to_xyxy();
    let [gx1, gy1, gx2, gy2] = target.to_xyxy();
    let (pw, ph) = (px2 - px1, py2 - py1);
    let area_p = pw * ph;
    let area_g = (gx2 - gx1) * (gy2 - gy1);
    let iw_raw = px2.min(gx2) - px1.max(gx1);
    let ih_raw = py2.min(gy2) - py1.max(gy1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_p + area_g - inter;
    let ew = px2.max(gx2) - px1.min(gx1);
    let eh = py2.max(gy2) - py1.min(gy1);
    let enclose = ew * eh;
    let loss = 2.0 - inter / union - union / enclose;

    let d_inter = -(union + inter) / (union * union) + 1.0 / enclose;
    let d_area = inter / (union * union) - 1.0 / enclose;
    let d_enc = union / (enclose * enclose);

    // d(x1, y1, x2, y2)
    let mut d = [0.0; 4];
    d[0] += d_area * -ph;
    d[2] += d_area * ph;
    d[1] += d_area * -pw;
    d[3] += d_area * pw;
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if px1 > gx1 {
            d[0] -= d_inter * ih;
        }
        if px2 < gx2 {
            d[2] += d_inter * ih;
        }
        if py1 > gy1 {
            d[1] -= d_inter * iw;
        }
        if py2 < gy2 {
            d[3] += d_inter * iw;
        }
    }
    if px1 < gx1 {
        d[0] -= d_enc * eh;
    }
    if px2 > gx2 {
        d[2] += d_enc * eh;
    }
    if py1 < gy1 {
        d[1] -= d_enc * ew;
    }
    if py2 > gy2 {
        d[3] += d_enc * ew;
    }
    let grad = [d[0] + d[2], d[1] + d[3], (d[2] - d[0]) / 2.0, (d[3] - d[1]) / 2.0];
    (loss, grad)
}

/// Targets and weights for one level, indexed by location.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPlan {
    /// Class label for positives.
    pub class: Vec<Option<usize>>,
    /// Multiplier on the location's whole classification term.
    pub cls_weight: Vec<f64>,
    /// Regression target for positives.
    pub box_target: Vec<Option<BoundingBox>>,
}

impl LevelPlan {
    pub fn negatives(len: usize) -> Self {
        Self {
            class: vec![None; len],
            cls_weight: vec![1.0; len],
            box_target: vec![None; len],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossPlan {
    pub levels: Vec<LevelPlan>,
    /// Both terms are divided by this (number of positives, at least 1).
    pub normalizer: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Evaluates the weighted loss and its gradient in the head outputs.
pub fn composed_loss<T: Real>(
    outputs: &[LevelOutput<T>],
    plan: &LossPlan,
    cfg: &LossConfig,
) -> (LossBreakdown, HeadGrads<T>) {
    let mut parts = LossBreakdown::default();
    let mut grads = HeadGrads {
        cls: Vec::with_capacity(outputs.len()),
        reg: Vec::with_capacity(outputs.len()),
    };
    let inv = 1.0 / plan.normalizer;
    for (out, lp) in outputs.iter().zip(&plan.levels) {
        let n = out.grid.len();
        let c = out.cls.c;
        let mut dcls = Tensor::zeros(c, out.grid.grid_h, out.grid.grid_w);
        let mut dreg = Tensor::zeros(4, out.grid.grid_h, out.grid.grid_w);
        for idx in 0..n {
            let w = lp.cls_weight[idx];
            if w != 0.0 {
                for k in 0..c {
                    let z = out.cls.data[k * n + idx].to_f64();
                    let (l, g) = focal_term(z, lp.class[idx] == Some(k), cfg.focal_gamma, cfg.focal_alpha);
                    parts.cls += w * l * inv;
                    dcls.data[k * n + idx] = T::from_f64(w * g * inv);
                }
            }
            if let Some(target) = lp.box_target[idx] {
                let t = out.box_params(idx);
                let pred = out.decoded(idx);
                let (l, g) = giou_loss(&pred, &target);
                let scale = cfg.reg_weight * inv;
                parts.reg += scale * l;
                let s = out.grid.stride as f64;
                let dt = [
                    g[0] * s,
                    g[1] * s,
                    if t[2].abs() < MAX_LOG_SCALE { g[2] * pred.w } else { 0.0 },
                    if t[3].abs() < MAX_LOG_SCALE { g[3] * pred.h } else { 0.0 },
                ];
                for (d, v) in dt.iter().enumerate() {
                    dreg.data[d * n + idx] = T::from_f64(scale * v);
                }
            }
        }
        grads.cls.push(dcls);
        grads.reg.push(dreg);
    }
    (parts, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn focal_gradients_match_finite_differences() {
        for &z in &[-6.0, -1.3, 0.0, 0.7, 4.0] {
            for &t in &[true, false] {
                let (_, g) = focal_term(z, t, 2.0, 0.25);
                let num = fd(|x| focal_term(x, t, 2.0, 0.25).0, z);
                assert!((g - num).abs() < 1e-7, "z={z} t={t}: {g} vs {num}");
            }
        }
    }

    #[test]
    fn focal_reduces_to_weighted_bce_at_gamma_zero() {
        let z: f64 = 0.4;
        let p = sigmoid(z);
        let (l1, _) = focal_term(z, true, 0.0, 0.25);
        let (l0, _) = focal_term(z, false, 0.0, 0.25);
        assert!((l1 + 0.25 * p.ln()).abs() < 1e-12);
        assert!((l0 + 0.75 * (1.0 - p).ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_is_finite_for_extreme_logits() {
        for &z in &[-800.0, 800.0] {
            for &t in &[true, false] {
                let (l, g) = focal_term(z, t, 2.0, 0.25);
                assert!(l.is_finite() && g.is_finite());
            }
        }
    }

    #[test]
    fn giou_identity_is_zero() {
        let b = BoundingBox::new(5.0, 5.0, 3.0, 4.0);
        let (l, g) = giou_loss(&b, &b);
        assert!(l.abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn giou_gradients_match_finite_differences() {
        let target = BoundingBox::new(10.0, 10.0, 6.0, 4.0);
        let preds = [
            BoundingBox::new(11.3, 9.1, 5.2, 5.7),
            BoundingBox::new(19.0, 3.0, 2.0, 3.0),
            BoundingBox::new(10.4, 10.2, 9.0, 7.5),
        ];
        for p in preds {
            let (_, g) = giou_loss(&p, &target);
            for d in 0..4 {
                let num = fd(
                    |x| {
                        let mut a = p.to_array();
                        a[d] = x;
                        giou_loss(&BoundingBox::from_array(a), &target).0
                    },
                    p.to_array()[d],
                );
                assert!((g[d] - num).abs() < 1e-7, "{p:?} d={d}: {} vs {num}", g[d]);
            }
        }
    }

    #[test]
    fn giou_disjoint_exceeds_one() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BoundingBox::new(10.0, 0.0, 2.0, 2.0);
        let (l, _) = giou_loss(&a, &b);
        assert!(l > 1.0 && l < 2.0);
    }
}
