//! Trend-guided label reweighting.

/// Cleanliness of a positive from its score trend: `1 - s_prev / s_cur` when
/// that is non-negative, otherwise `floor`. A zero current score counts as a
/// non-increasing trend.
pub fn cleanliness(s_prev: f64, s_cur: f64, floor: f64) -> f64 {
    match trend(s_prev, s_cur) {
        Some(x) if x >= 0.0 => x,
        _ => floor,
    }
}

fn trend(s_prev: f64, s_cur: f64) -> Option<f64> {
    (s_cur > 0.0).then(|| 1.0 - s_prev / s_cur)
}

/// Each positive's share of its gt's total score. All-zero scores give the
/// uniform split.
pub fn primacy(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter().map(|s| s / total).collect()
    } else {
        let n = scores.len() as f64;
        vec![1.0 / n; scores.len()]
    }
}

/// `alpha * c + (1 - alpha) * r`.
pub fn positive_weight(c: f64, r: f64, alpha: f64) -> f64 {
    alpha * c + (1.0 - alpha) * r
}

/// `s_prev / s_cur` clipped to 1; a zero current score gives 1.
pub fn negative_weight(s_prev: f64, s_cur: f64) -> f64 {
    if s_cur <= 0.0 {
        return 1.0;
    }
    let x = s_prev / s_cur;
    if x > 1.0 {
        1.0
    } else {
        x
    }
}

/// Loss weights for the positives of one gt.
///
/// `prev[j]` is the sample's score in the previous epoch (`None` when it has
/// no history there), `cur[j]` its current score. When no positive has a
/// previous score the weights are primacy-only. Samples without a previous
/// score, or with a falling trend, take the smallest strictly positive
/// cleanliness in the set, or `1 / N` if there is none.
pub fn gt_positive_weights(prev: &[Option<f64>], cur: &[f64], alpha: f64) -> Vec<f64> {
    assert_eq!(prev.len(), cur.len());
    let r = primacy(cur);
    if prev.iter().all(Option::is_none) {
        return r;
    }
    let raw: Vec<Option<f64>> = prev
        .iter()
        .zip(cur)
        .map(|(p, &c)| p.and_then(|p| trend(p, c)))
        .collect();
    let floor = raw
        .iter()
        .flatten()
        .copied()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() {
        floor
    } else {
        1.0 / cur.len() as f64
    };
    raw.iter()
        .zip(&r)
        .map(|(x, &r)| {
            let c = match x {
                Some(x) if *x >= 0.0 => *x,
                _ => floor,
            };
            positive_weight(c, r, alpha)
        })
        .collect()
}
