//! Train the toy detector on noisy labels and score it on clean ones.
//!
//! ```text
//! cargo run --release --example train_detector -- box 0.3 tls 12
//! ```
//! Arguments: noise kind (or `clean`), level, method, epochs.

use robust_tod::eval::evaluate;
use robust_tod::noisegen::{synthesize, NoiseSpec};
use robust_tod::toydet::{
    build_dataset, predict, train_with_observer, DetectorConfig, ImageStore, OptimizerKind, SceneConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind = args.first().map_or("box", String::as_str);
    let level: f64 = args.get(1).map_or(Ok(0.3), |s| s.parse())?;
    let method = args.get(2).map_or("tls", String::as_str).parse()?;
    let epochs: u32 = args.get(3).map_or(Ok(12), |s| s.parse())?;

    let scene = SceneConfig {
        image_size: 64,
        objects_per_image: (2, 6),
        class_contrast: 1.0,
        ..SceneConfig::default()
    };
    let (clean_train, images) = build_dataset(&scene, 0, 400)?;
    let (clean_val, val_images) = build_dataset(&scene, 1_000_000, 100)?;
    let store = ImageStore::from_dataset_images(&clean_train, images)?;
    let train_set = match kind {
        "clean" => clean_train.clone(),
        k => synthesize(&clean_train, &NoiseSpec::new(k.parse()?, level, 0)?)?.dataset,
    };

    let mut cfg = DetectorConfig {
        epochs,
        toggles: method,
        ..DetectorConfig::default()
    };
    cfg.optim.kind = OptimizerKind::Adam;
    cfg.optim.lr = 0.005;
    cfg.optim.weight_decay = 0.0;
    cfg.optim.decay_epochs = vec![epochs * 2 / 3, epochs * 11 / 12];

    println!("training {} on {kind} {level} for {epochs} epochs", method.label());
    let outcome = train_with_observer(&train_set, &store, &cfg, |m| {
        println!(
            "epoch {:>2}  loss {:.4} (cls {:.4}, reg {:.4})  pos/img {:.1}  w+ {:.3}  w- {:.3}  clc filtered {}",
            m.epoch,
            m.loss,
            m.cls_loss,
            m.reg_loss,
            m.positives_per_image,
            m.mean_pos_weight,
            m.mean_neg_weight,
            m.clc_filtered
        );
    })?;

    let detections = clean_val
        .images()
        .iter()
        .zip(&val_images)
        .map(|(info, img)| (info.id, predict(&outcome.model, img)))
        .collect();
    let r = evaluate(&detections, &clean_val)?;
    println!("clean val: mAP {:.4}  AP50 {:.4}  AP75 {:.4}", r.map, r.ap50, r.ap75);
    Ok(())
}
