//! Recurrent box regeneration pulling a perturbed target back toward the
//! box the detector keeps predicting.

use robust_tod::annotations::BoundingBox;
use robust_tod::noisegen::PerturbationDraw;
use robust_tod::tls::{BoxCandidate, BoxRegenerator, SampleKey};

fn main() {
    let clean = BoundingBox::new(32.0, 30.0, 10.0, 8.0);
    let noisy = PerturbationDraw {
        dx: 0.25,
        dy: -0.2,
        dw: 0.3,
        dh: -0.25,
    }
    .apply(&clean);
    let mut regen = BoxRegenerator::new(4, 1.0);
    regen.insert_image(0, vec![noisy]);

    println!("noisy gt IoU with clean box: {:.4}", noisy.iou(&clean));
    for epoch in 1..=6u32 {
        // The head has learned the object; its predictions scatter around
        // the clean box with a confidence that grows over training.
        let score = 0.3 + 0.1 * f64::from(epoch);
        let candidates = (0..6)
            .map(|i| {
                let jitter = 0.3 * (f64::from(i) - 2.5);
                BoxCandidate {
                    key: SampleKey::new(0, 7, i),
                    score: score - 0.02 * f64::from(i),
                    bbox: BoundingBox::new(clean.cx + jitter, clean.cy - jitter, clean.w, clean.h),
                }
            })
            .collect();
        regen.collect(0, 0, candidates);
        regen.finish_epoch(epoch);
        let target = regen.targets(0).expect("image registered")[0];
        println!(
            "epoch {epoch}: target ({:.2}, {:.2}, {:.2}, {:.2})  IoU {:.4}",
            target.cx,
            target.cy,
            target.w,
            target.h,
            target.iou(&clean)
        );
    }
}
