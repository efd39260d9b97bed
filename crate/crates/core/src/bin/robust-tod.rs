use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;

use robust_tod::annotations::{load_dataset, save_dataset};
use robust_tod::config::{load_config, LabConfig};
use robust_tod::eval::{evaluate, load_results, plot_report, run_sweep, DetectionSet, SweepSpec};
use robust_tod::noisegen::{noise_report, synthesize, NoiseKind, NoiseReport, NoiseSpec};
use robust_tod::toydet::{build_dataset, predict, train_with_observer, Checkpoint, ImageStore, Toggles};

#[derive(Parser)]
#[command(
    version,
    about = "Label-noise synthesis, noise-robust training and evaluation on synthetic tiny objects"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clean scene dataset, or corrupt an existing one.
    Synthesize {
        /// Scene and detector configuration (TOML or JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corrupt this annotation file instead of generating scenes.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Number of scenes to generate.
        #[arg(long, default_value_t = 200)]
        images: u64,
        /// Index of the first generated scene.
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long)]
        kind: Option<NoiseKind>,
        #[arg(long, default_value_t = 0.0)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy detector on an annotation file of generated scenes.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configured toggles, e.g. `clc` or `tlr+rbr`.
        #[arg(long)]
        method: Option<Toggles>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics as JSON lines.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Score a checkpoint against clean annotations.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a resumable noise sweep; exits with 2 when some cells failed.
    Sweep {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render charts from a sweep directory.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn lab_config(path: Option<&Path>) -> anyhow::Result<LabConfig> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => LabConfig::default(),
    })
}

fn print_report(report: &NoiseReport) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    print!("{report}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Synthesize {
            config,
            input,
            images,
            start,
            kind,
            level,
            seed,
            out,
        } => {
            let lab = lab_config(config.as_deref())?;
            let clean = match &input {
                Some(p) => load_dataset(p)?,
                None => build_dataset(&lab.scene, start, images)?.0,
            };
            let Some(kind) = kind else {
                if input.is_some() {
                    bail!("--in without --kind has nothing to do");
                }
                save_dataset(&clean, &out)?;
                info!(
                    "wrote {} annotations on {} images",
                    clean.annotations().len(),
                    clean.images().len()
                );
                return Ok(ExitCode::SUCCESS);
            };
            let noisy = synthesize(&clean, &NoiseSpec::new(kind, level, seed)?)?.dataset;
            save_dataset(&noisy, &out)?;
            print_report(&noise_report(&clean, &noisy)?)?;
        }
        Command::Train {
            config,
            data,
            method,
            out,
            metrics,
        } => {
            let lab = lab_config(config.as_deref())?;
            let ds = load_dataset(&data)?;
            let store = ImageStore::render_scenes(&ds, &lab.scene)?;
            let mut cfg = lab.detector;
            if let Some(m) = method {
                cfg.toggles = m;
            }
            let outcome = train_with_observer(&ds, &store, &cfg, |m| {
                info!(
                    "epoch {:>2}  loss {:.4}  lr {:.2e}  {:.1}s",
                    m.epoch, m.loss, m.lr, m.seconds
                )
            })?;
            Checkpoint {
                config: outcome.config.clone(),
                model: outcome.model.clone(),
            }
            .save(&out)?;
            if let Some(p) = metrics {
                robust_tod::toydet::train::write_metrics_jsonl(p, &outcome.metrics)?;
            }
        }
        Command::Eval {
            config,
            model,
            data,
            out,
        } => {
            let lab = lab_config(config.as_deref())?;
            let ckpt = Checkpoint::load(&model)?;
            let ds = load_dataset(&data)?;
            let store = ImageStore::render_scenes(&ds, &lab.scene)?;
            let dets: DetectionSet = ds
                .images()
                .iter()
                .map(|im| (im.id, predict(&ckpt.model, store.get(im.id).expect("rendered above"))))
                .collect();
            let result = evaluate(&dets, &ds)?;
            let json = serde_json::to_string_pretty(&result)?;
            println!("{json}");
            if let Some(p) = out {
                std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Sweep { spec, out } => {
            let spec: SweepSpec = match spec {
                Some(p) => load_config(p)?,
                None => SweepSpec::default(),
            };
            let summary = run_sweep(&spec, &out)?;
            println!(
                "{} cells: {} computed, {} resumed, {} failed",
                summary.rows.len(),
                summary.computed,
                summary.skipped,
                summary.failed
            );
            if summary.is_partial() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Plot { results, out } => {
            let rows = load_results(&results)?;
            for p in plot_report(&rows, &results, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
