mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_tod::annotations::BoundingBox;
use robust_tod::toydet::loss::{composed_loss, LossConfig};
use robust_tod::toydet::model::image_tensor;
use robust_tod::toydet::{
    build_dataset, generate_scene, predict, train, Detector, DetectorConfig, GrayImage, ImageStore, OptimizerKind,
    SceneConfig, Toggles,
};

#[test]
fn class_histogram_follows_frequencies() {
    let cfg = SceneConfig::default();
    let expected = cfg.normalized_frequency();
    let mut counts = vec![0u64; cfg.num_classes];
    let mut index = 0;
    while counts.iter().sum::<u64>() < 10_000 {
        for o in generate_scene(&cfg, index).objects {
            counts[o.class_id] += 1;
        }
        index += 1;
    }
    let n = counts.iter().sum::<u64>() as f64;
    let chi2: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(&o, &p)| (o as f64 - n * p).powi(2) / (n * p))
        .sum();
    // 5 degrees of freedom, p = 0.001
    assert!(chi2 < 20.52, "chi2 {chi2}, counts {counts:?}");
}

#[test]
fn objects_respect_size_and_bounds() {
    let cfg = SceneConfig::default();
    let (ds, images) = build_dataset(&cfg, 0, 50).unwrap();
    assert_eq!(images.len(), 50);
    let s = cfg.image_size as f64;
    for a in ds.annotations() {
        let [x1, y1, x2, y2] = a.bbox.to_xyxy();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= s && y2 <= s);
        assert!(a.bbox.side() <= cfg.size_range.1 + 1e-9);
    }
}

#[test]
fn backprop_matches_finite_differences() {
    let size = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model: Detector<f64> = Detector::new(common::tiny_arch(3), &mut rng);
    // move the heads away from the prior so every term contributes
    for layer in model.layers_mut() {
        for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *w += rng.gen_range(-0.05..0.05);
        }
    }
    let pixels: Vec<f32> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
    let input = image_tensor::<f64>(&pixels, size, size);
    let gts = [
        BoundingBox::new(7.0, 8.0, 5.0, 4.0),
        BoundingBox::new(16.0, 15.0, 12.0, 10.0),
    ];
    let plan = common::plan_for(&gts, &[0, 2], size);
    let cfg = LossConfig::default();

    let loss_of = |m: &Detector<f64>| composed_loss(&m.forward(&input).0, &plan, &cfg).0.total();
    let (outputs, cache) = model.forward(&input);
    let (_, dout) = composed_loss(&outputs, &plan, &cfg);
    let mut grad = model.zeros_like();
    model.backward(&cache, &dout, &mut grad);

    let grads: Vec<Vec<f64>> = grad
        .layers()
        .iter()
        .map(|l| l.weight.iter().chain(&l.bias).copied().collect())
        .collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (li, g) in grads.iter().enumerate() {
        for _ in 0..6 {
            let p = rng.gen_range(0..g.len());
            let bump = |m: &mut Detector<f64>, d: f64| {
                let layer = &mut m.layers_mut()[li];
                let nw = layer.weight.len();
                if p < nw {
                    layer.weight[p] += d;
                } else {
                    layer.bias[p - nw] += d;
                }
            };
            let mut plus = model.clone();
            bump(&mut plus, h);
            let mut minus = model.clone();
            bump(&mut minus, -h);
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let err = (numeric - g[p]).abs() / numeric.abs().max(g[p].abs()).max(1e-3);
            worst = worst.max(err);
            checked += 1;
        }
    }
    assert!(checked > 30);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn blank_image_yields_no_detections() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model: Detector<f32> = Detector::new(common::tiny_arch(6), &mut rng);
    let blank = GrayImage {
        width: 64,
        height: 64,
        pixels: vec![0.25; 64 * 64],
    };
    assert!(predict(&model, &blank).is_empty());
}

fn tiny_setup() -> (robust_tod::annotations::DetDataset, ImageStore, DetectorConfig) {
    let scene = SceneConfig {
        image_size: 48,
        objects_per_image: (2, 4),
        ..SceneConfig::default()
    };
    let (ds, images) = build_dataset(&scene, 0, 12).unwrap();
    let store = ImageStore::from_dataset_images(&ds, images).unwrap();
    let mut cfg = DetectorConfig {
        widths: [4, 8, 8, 8],
        head_channels: 8,
        epochs: 3,
        ..DetectorConfig::default()
    };
    cfg.optim.kind = OptimizerKind::Adam;
    cfg.optim.lr = 0.005;
    cfg.optim.warmup_steps = 2;
    cfg.optim.decay_epochs = vec![];
    (ds, store, cfg)
}

#[test]
fn training_is_deterministic() {
    let (ds, store, mut cfg) = tiny_setup();
    cfg.toggles = "all".parse().unwrap();
    let a = train(&ds, &store, &cfg).unwrap();
    let b = train(&ds, &store, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.target_history, b.target_history);
    assert!(a.metrics.iter().all(|m| m.loss.is_finite()));
    assert_eq!(a.metrics.len(), 3);
}

#[test]
fn idle_corrector_does_not_change_training() {
    // With filtering never active CLC only observes.
    let (ds, store, mut cfg) = tiny_setup();
    let base = train(&ds, &store, &cfg).unwrap();
    cfg.toggles = Toggles {
        clc: true,
        ..Toggles::BASELINE
    };
    cfg.clc.warmup_fraction = 1.0;
    let clc = train(&ds, &store, &cfg).unwrap();
    assert_eq!(base.model, clc.model);
    assert!(clc.corrector.unwrap().dcm.rows_touched().iter().any(|&n| n > 0));
}

#[test]
fn toggles_only_touch_their_own_state() {
    let (ds, store, mut cfg) = tiny_setup();
    for label in ["baseline", "clc", "tlr", "rbr", "clc+tlr+rbr"] {
        cfg.toggles = label.parse().unwrap();
        let out = train(&ds, &store, &cfg).unwrap();
        let t = cfg.toggles;
        assert_eq!(out.corrector.is_some(), t.clc, "{label}");
        assert_eq!(!out.target_history.is_empty(), t.rbr, "{label}");
        let last = out.metrics.last().unwrap();
        if !t.tlr {
            assert_eq!(last.mean_pos_weight, 1.0, "{label}");
            assert_eq!(last.mean_neg_weight, 1.0, "{label}");
        }
        if !t.clc {
            assert_eq!(last.clc_filtered, 0, "{label}");
        }
    }
}
