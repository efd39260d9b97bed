//! Corrupt a generated scene dataset with each noise kind and print what
//! changed.
//!
//! ```text
//! cargo run --release --example synthesize_noise -- 0.3
//! ```

use robust_tod::noisegen::{noise_report, synthesize, NoiseKind, NoiseSpec};
use robust_tod::toydet::{build_dataset, SceneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let level: f64 = std::env::args().nth(1).map_or(Ok(0.2), |s| s.parse())?;
    let scene = SceneConfig::default();
    let (clean, _) = build_dataset(&scene, 0, 500)?;
    println!(
        "{} clean annotations on {} images\n",
        clean.annotations().len(),
        clean.images().len()
    );

    for kind in [
        NoiseKind::Missing,
        NoiseKind::Extra,
        NoiseKind::ClassShift,
        NoiseKind::Box,
    ] {
        let outcome = synthesize(&clean, &NoiseSpec::new(kind, level, 7)?)?;
        println!("== {kind} at {level}: {} annotations touched", outcome.audit.len());
        print!("{}", noise_report(&clean, &outcome.dataset)?);
        println!();
    }

    // Components of a mixed spec are applied in a fixed order.
    let mixed = NoiseSpec::mixed(vec![(NoiseKind::ClassShift, level), (NoiseKind::Box, level)], 7)?;
    let noisy = synthesize(&clean, &mixed)?.dataset;
    println!("== class shift + box");
    print!("{}", noise_report(&clean, &noisy)?);
    Ok(())
}
