//! Noise sweeps: synthesize noise, train, evaluate on the clean split.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::ap::{evaluate, DetectionSet, EvalResult};
use crate::annotations::{BoundingBox, DetDataset};
use crate::error::{Error, Result};
use crate::noisegen::{synthesize, NoiseKind, NoiseSpec};
use crate::toydet::train::{SampleWeight, TargetSnapshot};
use crate::toydet::{
    build_dataset, predict, train, DetectorConfig, GrayImage, ImageStore, SceneConfig, Toggles, TrainOutcome,
};

/// Scene index where the validation split starts.
pub const VAL_OFFSET: u64 = 1_000_000;

pub const RESULTS_JSONL: &str = "results.jsonl";
pub const RESULTS_CSV: &str = "results.csv";
pub const ARTIFACTS_DIR: &str = "artifacts";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub scene: SceneConfig,
    pub train_images: u64,
    pub val_images: u64,
    pub detector: DetectorConfig,
    pub kinds: Vec<NoiseKind>,
    pub levels: Vec<f64>,
    pub methods: Vec<Toggles>,
    pub seeds: Vec<u64>,
    /// Write per-cell weight and box-target dumps for plotting.
    pub dump_artifacts: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train_images: 1000,
            val_images: 200,
            detector: DetectorConfig::default(),
            kinds: vec![
                NoiseKind::Missing,
                NoiseKind::Extra,
                NoiseKind::ClassShift,
                NoiseKind::Box,
            ],
            levels: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            methods: vec![Toggles::BASELINE],
            seeds: vec![0],
            dump_artifacts: false,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.detector.validate()?;
        if self.train_images == 0 || self.val_images == 0 {
            return Err(Error::Config("train_images and val_images must be >= 1".into()));
        }
        if self.train_images > VAL_OFFSET {
            return Err(Error::Config(format!("train_images must be <= {VAL_OFFSET}")));
        }
        if self.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("noise levels must be in [0, 1]".into()));
        }
        if self.kinds.contains(&NoiseKind::Mixed) {
            return Err(Error::Config(
                "mixed noise is not a sweep axis; list its components".into(),
            ));
        }
        if self.methods.is_empty() || self.seeds.is_empty() || self.levels.is_empty() {
            return Err(Error::Config("methods, seeds and levels must be non-empty".into()));
        }
        Ok(())
    }

    /// Grid cells in a fixed order. Level 0 is one clean cell per method
    /// and seed regardless of kind.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut noise: Vec<(Option<NoiseKind>, f64)> = Vec::new();
        if self.levels.contains(&0.0) {
            noise.push((None, 0.0));
        }
        for &k in &self.kinds {
            for &l in self.levels.iter().filter(|&&l| l > 0.0) {
                noise.push((Some(k), l));
            }
        }
        let mut cells = Vec::new();
        for (kind, level) in noise {
            for &method in &self.methods {
                for &seed in &self.seeds {
                    cells.push(SweepCell {
                        kind,
                        level,
                        method,
                        seed,
                    });
                }
            }
        }
        cells
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// `None` for the clean (level 0) cell.
    pub kind: Option<NoiseKind>,
    pub level: f64,
    pub method: Toggles,
    pub seed: u64,
}

impl SweepCell {
    pub fn kind_label(&self) -> &'static str {
        self.kind.map_or("clean", NoiseKind::as_str)
    }

    /// Stable identifier, also used as the artifact directory name.
    pub fn id(&self) -> String {
        format!(
            "{}-{:.2}-{}-s{}",
            self.kind_label(),
            self.level,
            self.method.label(),
            self.seed
        )
    }
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell_id: String,
    pub kind: String,
    pub level: f64,
    pub method: String,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_vt: Option<f64>,
    pub ap_t: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub train_seconds: Option<f64>,
}

impl SweepRow {
    fn new(cell: &SweepCell, outcome: std::result::Result<(&EvalResult, f64), String>) -> Self {
        let (ok, error, e, secs) = match outcome {
            Ok((e, s)) => (true, None, Some(e), Some(s)),
            Err(msg) => (false, Some(msg), None, None),
        };
        Self {
            cell_id: cell.id(),
            kind: cell.kind_label().to_string(),
            level: cell.level,
            method: cell.method.label(),
            seed: cell.seed,
            ok,
            error,
            map: e.map(|e| e.map),
            ap50: e.map(|e| e.ap50),
            ap75: e.map(|e| e.ap75),
            ap_vt: e.and_then(|e| e.ap_vt),
            ap_t: e.and_then(|e| e.ap_t),
            ap_s: e.and_then(|e| e.ap_s),
            ap_m: e.and_then(|e| e.ap_m),
            train_seconds: secs,
        }
    }
}

/// Result of one trained and evaluated cell.
pub struct CellRun {
    pub noisy: DetDataset,
    pub outcome: TrainOutcome,
    pub eval: EvalResult,
    pub train_seconds: f64,
}

/// Clean train/val splits rendered once and shared by every cell.
pub struct Benchmark {
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub clean_train: DetDataset,
    pub train_images: ImageStore,
    clean_val: DetDataset,
    val_images: Vec<GrayImage>,
}

impl Benchmark {
    pub fn new(scene: SceneConfig, detector: DetectorConfig, train_images: u64, val_images: u64) -> Result<Self> {
        let (clean_train, imgs) = build_dataset(&scene, 0, train_images)?;
        let train_images = ImageStore::from_dataset_images(&clean_train, imgs)?;
        let (clean_val, val_images) = build_dataset(&scene, VAL_OFFSET, val_images)?;
        Ok(Self {
            scene,
            detector,
            clean_train,
            train_images,
            clean_val,
            val_images,
        })
    }

    pub fn from_spec(spec: &SweepSpec) -> Result<Self> {
        spec.validate()?;
        Self::new(
            spec.scene.clone(),
            spec.detector.clone(),
            spec.train_images,
            spec.val_images,
        )
    }

    /// The clean validation annotations every cell is scored against.
    pub fn clean_val(&self) -> &DetDataset {
        &self.clean_val
    }

    /// The noisy training set of a cell.
    pub fn noisy_train(&self, cell: &SweepCell) -> Result<DetDataset> {
        match cell.kind {
            None => Ok(self.clean_train.clone()),
            Some(kind) => Ok(synthesize(&self.clean_train, &NoiseSpec::new(kind, cell.level, cell.seed)?)?.dataset),
        }
    }

    pub fn predict_val(&self, outcome: &TrainOutcome) -> DetectionSet {
        self.clean_val
            .images()
            .iter()
            .zip(&self.val_images)
            .map(|(info, img)| (info.id, predict(&outcome.model, img)))
            .collect()
    }

    /// Synthesizes the cell's noise, trains, and evaluates on clean val.
    pub fn run(&self, cell: &SweepCell) -> Result<CellRun> {
        let noisy = self.noisy_train(cell)?;
        let cfg = DetectorConfig {
            toggles: cell.method,
            seed: cell.seed,
            ..self.detector.clone()
        };
        let started = Instant::now();
        let outcome = train(&noisy, &self.train_images, &cfg)?;
        let train_seconds = started.elapsed().as_secs_f64();
        let eval = evaluate(&self.predict_val(&outcome), &self.clean_val)?;
        Ok(CellRun {
            noisy,
            outcome,
            eval,
            train_seconds,
        })
    }
}

/// Outcome of [`run_sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
}

impl SweepSummary {
    pub fn is_partial(&self) -> bool {
        self.failed > 0
    }
}

/// Reads every row of a results directory; a missing file is empty.
pub fn load_results(dir: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = dir.as_ref().join(RESULTS_JSONL);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => rows.push(r),
            // A torn final line from an interrupted write.
            Err(e) => warn!("skipping unreadable row in {}: {e}", path.display()),
        }
    }
    Ok(rows)
}

/// Latest row per cell, in first-seen order.
fn latest_rows(rows: Vec<SweepRow>) -> Vec<SweepRow> {
    let mut order = Vec::new();
    let mut latest: BTreeMap<String, SweepRow> = BTreeMap::new();
    for r in rows {
        if !latest.contains_key(&r.cell_id) {
            order.push(r.cell_id.clone());
        }
        latest.insert(r.cell_id.clone(), r);
    }
    order.into_iter().filter_map(|id| latest.remove(&id)).collect()
}

fn append_row(path: &Path, row: &SweepRow) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(row)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

/// Writes the table as CSV via a temporary file and rename.
pub fn write_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| Error::io(&tmp, e.into()))?;
        for r in rows {
            w.serialize(r).map_err(|e| Error::io(&tmp, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs every cell not already completed in `out_dir`. Failed cells are
/// recorded and retried on the next run; completed ones are never redone.
pub fn run_sweep(spec: &SweepSpec, out_dir: impl AsRef<Path>) -> Result<SweepSummary> {
    let out_dir = out_dir.as_ref();
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jsonl = out_dir.join(RESULTS_JSONL);
    let previous = latest_rows(load_results(out_dir)?);
    let done: BTreeSet<String> = previous.iter().filter(|r| r.ok).map(|r| r.cell_id.clone()).collect();

    let cells = spec.cells();
    let todo: Vec<&SweepCell> = cells.iter().filter(|c| !done.contains(&c.id())).collect();
    let skipped = cells.len() - todo.len();
    let bench = if todo.is_empty() {
        None
    } else {
        Some(Benchmark::from_spec(spec)?)
    };
    let mut computed = 0;
    for (i, cell) in todo.iter().enumerate() {
        let bench = bench.as_ref().expect("built when there is work");
        info!("cell {}/{}: {}", i + 1, todo.len(), cell.id());
        let row = match bench.run(cell) {
            Ok(run) => {
                if spec.dump_artifacts {
                    let dir = out_dir.join(ARTIFACTS_DIR).join(cell.id());
                    if let Err(e) = dump_artifacts(&dir, bench, &run) {
                        warn!("could not write artifacts for {}: {e}", cell.id());
                    }
                }
                SweepRow::new(cell, Ok((&run.eval, run.train_seconds)))
            }
            Err(e) => {
                warn!("cell {} failed: {e}", cell.id());
                SweepRow::new(cell, Err(e.to_string()))
            }
        };
        append_row(&jsonl, &row)?;
        computed += 1;
        let table = latest_rows(load_results(out_dir)?);
        write_csv(&out_dir.join(RESULTS_CSV), &table)?;
    }

    let wanted: BTreeSet<String> = cells.iter().map(SweepCell::id).collect();
    let rows: Vec<SweepRow> = latest_rows(load_results(out_dir)?)
        .into_iter()
        .filter(|r| wanted.contains(&r.cell_id))
        .collect();
    if computed == 0 {
        write_csv(&out_dir.join(RESULTS_CSV), &rows)?;
    }
    let failed = rows.iter().filter(|r| !r.ok).count();
    Ok(SweepSummary {
        rows,
        computed,
        skipped,
        failed,
    })
}

/// Final-epoch weights of one training image, with its pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDump {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    /// Row-major 8-bit grayscale.
    pub pixels: Vec<u8>,
    pub strides: Vec<u32>,
    pub gts: Vec<BoundingBox>,
    pub samples: Vec<SampleWeight>,
}

/// Mean IoU between regression targets and clean boxes, per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetCurve {
    pub label: String,
    pub points: Vec<(u32, f64)>,
}

/// Mean IoU(target, clean) per epoch over annotations that exist in both
/// the clean and the noisy dataset, matched by annotation id.
pub fn target_iou_curve(
    label: &str,
    history: &[TargetSnapshot],
    clean: &DetDataset,
    noisy: &DetDataset,
) -> TargetCurve {
    let clean_by_id: BTreeMap<u64, &BoundingBox> = clean.annotations().iter().map(|a| (a.id, &a.bbox)).collect();
    let noisy_by_image = noisy.annotations_by_image();
    let points = history
        .iter()
        .map(|snap| {
            let (mut sum, mut n) = (0.0, 0usize);
            for (img, targets) in &snap.targets {
                let Some(anns) = noisy_by_image.get(img) else { continue };
                for (a, t) in anns.iter().zip(targets) {
                    if let Some(c) = clean_by_id.get(&a.id) {
                        sum += t.iou(c);
                        n += 1;
                    }
                }
            }
            (snap.epoch, if n > 0 { sum / n as f64 } else { 0.0 })
        })
        .collect();
    TargetCurve {
        label: label.to_string(),
        points,
    }
}

/// Number of training images whose weights are dumped per cell.
const DUMPED_IMAGES: usize = 3;

fn dump_artifacts(dir: &PathBuf, bench: &Benchmark, run: &CellRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let by_image = run.noisy.annotations_by_image();
    let mut dumps = Vec::new();
    for (id, samples) in run.outcome.final_weights.iter().take(DUMPED_IMAGES) {
        let Some(img) = bench.train_images.get(*id) else {
            continue;
        };
        dumps.push(WeightDump {
            image_id: *id,
            width: img.width,
            height: img.height,
            pixels: img
                .pixels
                .iter()
                .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
            strides: crate::toydet::Architecture::STRIDES.to_vec(),
            gts: by_image
                .get(id)
                .map(|a| a.iter().map(|a| a.bbox).collect())
                .unwrap_or_default(),
            samples: samples.clone(),
        });
    }
    crate::annotations::write_json(&dir.join("weights.json"), &dumps)?;
    if !run.outcome.target_history.is_empty() {
        let curve = target_iou_curve(
            &run_label(run),
            &run.outcome.target_history,
            &bench.clean_train,
            &run.noisy,
        );
        crate::annotations::write_json(&dir.join("rbr_iou.json"), &curve)?;
    }
    Ok(())
}

fn run_label(run: &CellRun) -> String {
    format!("{} s{}", run.outcome.config.toggles.label(), run.outcome.config.seed)
}
