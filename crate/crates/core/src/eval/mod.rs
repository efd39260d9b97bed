//! Evaluation and experiment orchestration.

pub mod ap;
pub mod experiment;
pub mod report;

pub use ap::{coco_thresholds, compute_ap, evaluate, DetectionSet, EvalResult};
pub use experiment::{load_results, run_sweep, Benchmark, SweepCell, SweepRow, SweepSpec, SweepSummary};
pub use report::plot_report;
