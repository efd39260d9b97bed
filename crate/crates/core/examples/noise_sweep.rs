//! A small resumable noise sweep plus its charts. Rerunning with the same
//! output directory skips every finished cell.
//!
//! ```text
//! cargo run --release --example noise_sweep -- sweep-out
//! ```

use robust_tod::eval::{plot_report, run_sweep, SweepSpec};
use robust_tod::noisegen::NoiseKind;
use robust_tod::toydet::{OptimizerKind, SceneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).unwrap_or_else(|| "sweep-out".into());

    let mut spec = SweepSpec {
        scene: SceneConfig {
            image_size: 64,
            objects_per_image: (2, 6),
            ..SceneConfig::default()
        },
        train_images: 200,
        val_images: 50,
        kinds: vec![NoiseKind::ClassShift, NoiseKind::Box],
        levels: vec![0.0, 0.2, 0.4],
        methods: vec!["baseline".parse()?, "clc+tlr+rbr".parse()?],
        dump_artifacts: true,
        ..SweepSpec::default()
    };
    spec.detector.epochs = 4;
    spec.detector.optim.kind = OptimizerKind::Adam;
    spec.detector.optim.lr = 0.005;
    spec.detector.optim.weight_decay = 0.0;
    spec.detector.optim.decay_epochs = vec![3];

    let summary = run_sweep(&spec, &out)?;
    println!(
        "{} computed, {} resumed, {} failed",
        summary.computed, summary.skipped, summary.failed
    );
    for r in &summary.rows {
        println!("{:<32} mAP {:.4}", r.cell_id, r.map.unwrap_or(f64::NAN));
    }
    let charts = plot_report(&summary.rows, out.as_ref(), &std::path::Path::new(&out).join("plots"))?;
    println!("wrote {} charts under {out}/plots", charts.len());
    Ok(())
}
