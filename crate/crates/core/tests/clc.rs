use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_tod::clc::{
    clc_loss_weights, image_pillars, noisy_factor, ClassAwareCorrector, ClcConfig, DynamicConfidenceMatrix,
    SampleObservation,
};

fn obs(prediction: Vec<f64>, gt_class: usize) -> SampleObservation {
    SampleObservation { prediction, gt_class }
}

#[test]
fn ewma_matches_closed_form() {
    let c = 4;
    let t = 37;
    let beta = 1.0 - 1.0 / t as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dcm = DynamicConfidenceMatrix::new(c, t).unwrap();
    let mut history: Vec<Vec<f64>> = Vec::new();
    for _ in 0..250 {
        let p: Vec<f64> = (0..c).map(|_| rng.gen()).collect();
        dcm.update_from_image(&[obs(p.clone(), 2)]);
        history.push(p);
    }
    let k = history.len() as i32;
    for i in 0..c {
        let init = if i == 2 { 1.0 } else { 0.0 };
        let mut expected = beta.powi(k) * init;
        for (j, p) in history.iter().enumerate() {
            expected += (1.0 - beta) * beta.powi(k - 1 - j as i32) * p[i];
        }
        assert!((dcm.get(2, i) - expected).abs() < 1e-9, "col {i}");
    }
    // untouched rows keep the identity
    assert_eq!(dcm.row(0), &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(dcm.rows_touched(), &[0, 0, 250, 0]);
}

#[test]
fn pillar_is_per_image_mean() {
    let positives = vec![
        obs(vec![0.2, 0.6, 0.0], 1),
        obs(vec![0.4, 0.2, 0.1], 1),
        obs(vec![0.9, 0.0, 0.0], 0),
    ];
    let pillars = image_pillars(&positives, 3);
    assert_eq!(pillars.len(), 2);
    assert_eq!(pillars[0].class_y, 0);
    assert_eq!(pillars[1].class_y, 1);
    let m = &pillars[1].mean_prediction;
    assert!((m[0] - 0.3).abs() < 1e-12 && (m[1] - 0.4).abs() < 1e-12 && (m[2] - 0.05).abs() < 1e-12);

    // one EWMA step per class per image, not per sample
    let mut dcm = DynamicConfidenceMatrix::new(3, 10).unwrap();
    dcm.update_from_image(&positives);
    assert_eq!(dcm.rows_touched(), &[1, 1, 0]);
    assert!((dcm.get(1, 1) - (0.9 * 1.0 + 0.1 * 0.4)).abs() < 1e-12);
}

#[test]
fn flag_requires_all_three_conditions() {
    let dcm = DynamicConfidenceMatrix::from_rows(&[vec![0.8, 0.1, 0.1], vec![0.2, 0.7, 0.1], vec![0.1, 0.5, 0.6]], 100)
        .unwrap();
    // class 0 beats the label, the row expectation and its own diagonal
    assert_eq!(noisy_factor(&obs(vec![0.85, 0.3, 0.0], 1), &dcm), 0);
    // below v[0][0]
    assert_eq!(noisy_factor(&obs(vec![0.75, 0.3, 0.0], 1), &dcm), 1);
    // label wins
    assert_eq!(noisy_factor(&obs(vec![0.85, 0.9, 0.0], 1), &dcm), 1);
    // class 1 from row 2: beats p_2 and v[1][1] but not v[2][1]
    let row_high =
        DynamicConfidenceMatrix::from_rows(&[vec![0.8, 0.1, 0.1], vec![0.2, 0.7, 0.1], vec![0.1, 0.95, 0.6]], 100)
            .unwrap();
    assert_eq!(noisy_factor(&obs(vec![0.0, 0.9, 0.3], 2), &row_high), 1);
    // equality is not enough: the step is strict
    assert_eq!(noisy_factor(&obs(vec![0.8, 0.3, 0.0], 1), &dcm), 1);
}

#[test]
fn label_as_argmax_is_never_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20_000 {
        let c = rng.gen_range(2..8);
        let rows: Vec<Vec<f64>> = (0..c).map(|_| (0..c).map(|_| rng.gen()).collect()).collect();
        let dcm = DynamicConfidenceMatrix::from_rows(&rows, 100).unwrap();
        let p: Vec<f64> = (0..c).map(|_| rng.gen()).collect();
        let y = (0..c).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(noisy_factor(&obs(p, y), &dcm), 1);
    }
}

#[test]
fn flagging_is_monotone_in_diagonal() {
    // Raising any v[i][i] can only turn a flag off.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20_000 {
        let c = rng.gen_range(2..6);
        let mut rows: Vec<Vec<f64>> = (0..c).map(|_| (0..c).map(|_| rng.gen()).collect()).collect();
        let o = obs((0..c).map(|_| rng.gen()).collect(), rng.gen_range(0..c));
        let before = noisy_factor(&o, &DynamicConfidenceMatrix::from_rows(&rows, 100).unwrap());
        let i = rng.gen_range(0..c);
        rows[i][i] = rng.gen_range(rows[i][i]..=1.0);
        let after = noisy_factor(&o, &DynamicConfidenceMatrix::from_rows(&rows, 100).unwrap());
        assert!(after >= before);
    }
}

#[test]
fn warmup_disables_filtering() {
    let dcm = DynamicConfidenceMatrix::from_rows(&[vec![0.5, 0.1], vec![0.1, 0.5]], 100).unwrap();
    let positives = vec![obs(vec![0.9, 0.1], 1), obs(vec![0.1, 0.9], 1)];
    assert_eq!(clc_loss_weights(&positives, &dcm, 0.49, 0.5), vec![1.0, 1.0]);
    assert_eq!(clc_loss_weights(&positives, &dcm, 0.5, 0.5), vec![0.0, 1.0]);
}

#[test]
fn simulated_shifts_are_recovered() {
    // Four fifths of the labels are right and the model is fairly confident
    // on them; the rest are shifted and the model prefers the true class.
    let c = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut corrector = ClassAwareCorrector::new(c, ClcConfig::default()).unwrap();
    let (mut shifted, mut shifted_flagged, mut clean, mut clean_flagged) = (0u32, 0u32, 0u32, 0u32);
    for image in 0..4000 {
        let mut positives = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..6 {
            let true_class = rng.gen_range(0..c);
            let is_shifted = rng.gen_bool(0.2);
            let label = if is_shifted {
                (true_class + rng.gen_range(1..c)) % c
            } else {
                true_class
            };
            let mut p: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..0.2)).collect();
            p[true_class] = if is_shifted {
                rng.gen_range(0.75..0.95)
            } else {
                rng.gen_range(0.4..0.9)
            };
            if is_shifted {
                p[label] = rng.gen_range(0.0..p[true_class] - 0.3);
            }
            positives.push(obs(p, label));
            truth.push(is_shifted);
        }
        let weights = corrector.process_image(&positives, image as f64 / 4000.0);
        if image < 2000 {
            continue;
        }
        for (w, s) in weights.iter().zip(truth) {
            let flagged = *w == 0.0;
            if s {
                shifted += 1;
                shifted_flagged += u32::from(flagged);
            } else {
                clean += 1;
                clean_flagged += u32::from(flagged);
            }
        }
    }
    let recall = f64::from(shifted_flagged) / f64::from(shifted);
    let false_rate = f64::from(clean_flagged) / f64::from(clean);
    assert!(recall >= 0.9, "recall {recall}");
    assert!(false_rate <= 0.05, "false flags {false_rate}");
}

#[test]
fn rejects_degenerate_configs() {
    assert!(DynamicConfidenceMatrix::new(1, 10).is_err());
    assert!(DynamicConfidenceMatrix::new(3, 0).is_err());
    assert!(DynamicConfidenceMatrix::from_rows(&[vec![1.0], vec![0.0, 1.0]], 10).is_err());
}
