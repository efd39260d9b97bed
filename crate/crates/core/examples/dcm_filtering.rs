//! Feed the class-aware corrector a stream of simulated positives, a fifth
//! of them class-shifted, and watch what it filters once warm-up ends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_tod::clc::{ClassAwareCorrector, ClcConfig, SampleObservation};

const CLASSES: usize = 4;
const IMAGES: usize = 3000;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut corrector = ClassAwareCorrector::new(CLASSES, ClcConfig::default())?;
    let (mut caught, mut shifted, mut false_flags, mut clean) = (0, 0, 0, 0);

    for image in 0..IMAGES {
        let mut positives = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..5 {
            let true_class = rng.gen_range(0..CLASSES);
            let noisy = rng.gen_bool(0.2);
            let label = if noisy {
                (true_class + rng.gen_range(1..CLASSES)) % CLASSES
            } else {
                true_class
            };
            // the model has learned the true class, not the label
            let mut p: Vec<f64> = (0..CLASSES).map(|_| rng.gen_range(0.0..0.15)).collect();
            p[true_class] = rng.gen_range(0.5..0.95);
            positives.push(SampleObservation {
                prediction: p,
                gt_class: label,
            });
            truth.push(noisy);
        }
        let progress = image as f64 / IMAGES as f64;
        let weights = corrector.process_image(&positives, progress);
        if progress < corrector.config.warmup_fraction {
            continue;
        }
        for (w, noisy) in weights.iter().zip(truth) {
            let flagged = *w == 0.0;
            match (noisy, flagged) {
                (true, f) => {
                    shifted += 1;
                    caught += usize::from(f);
                }
                (false, f) => {
                    clean += 1;
                    false_flags += usize::from(f);
                }
            }
        }
    }

    println!("confidence matrix (row = label, column = prediction):");
    for row in corrector.dcm.to_rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  [{}]", cells.join("  "));
    }
    println!("\nfiltered {} of {} positives", corrector.filtered, corrector.seen);
    println!("after warm-up, shifted labels caught: {caught}/{shifted}");
    println!("after warm-up, clean labels filtered: {false_flags}/{clean}");
    Ok(())
}
