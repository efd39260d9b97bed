//! Desk-scale detection harness: procedural tiny-shapes scenes, a small
//! two-level anchor-free detector trained from scratch, Gaussian-prior label
//! assignment, and a training loop with the noise-robust components wired in.

pub mod assign;
pub mod loss;
pub mod model;
pub mod nn;
pub mod predict;
pub mod scene;
pub mod train;

pub use assign::{assign_samples, AssignConfig, Assignment};
pub use model::{Architecture, Detector, GridLevel};
pub use predict::{nms, predict, Detection};
pub use scene::{build_dataset, generate_scene, GrayImage, Scene, SceneConfig};
pub use train::{
    train, train_with_observer, Checkpoint, DetectorConfig, EpochMetrics, ImageStore, OptimConfig, OptimizerKind,
    Toggles, TrainOutcome,
};
