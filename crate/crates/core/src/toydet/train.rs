//! The training loop, with class-aware correction, trend reweighting and box
//! regeneration as independent switches.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::assign::{assign_samples, AssignConfig};
use super::loss::{composed_loss, sigmoid, LevelPlan, LossBreakdown, LossConfig, LossPlan};
use super::model::{image_tensor, Architecture, Detector, LevelOutput};
use super::nn::Tensor;
use super::scene::{render_key, GrayImage, SceneConfig};
use crate::annotations::{BoundingBox, DetDataset, Provenance};
use crate::clc::{ClassAwareCorrector, ClcConfig, SampleObservation};
use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::tls::{
    gt_positive_weights, negative_weight, BoxCandidate, BoxRegenerator, SampleKey, SampleScore, TlsConfig,
    TrendRegistry,
};

/// Method switches. Serialized as a label such as `"clc+tlr"`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Toggles {
    pub clc: bool,
    pub tlr: bool,
    pub rbr: bool,
}

impl Toggles {
    pub const BASELINE: Toggles = Toggles {
        clc: false,
        tlr: false,
        rbr: false,
    };

    /// Short label such as `clc+tlr`, or `baseline`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.clc, "clc"), (self.tlr, "tlr"), (self.rbr, "rbr")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

impl std::str::FromStr for Toggles {
    type Err = Error;

    /// Parses `baseline`, `all`, or a `+`/`,` separated subset of
    /// `clc`, `tlr`, `rbr`, `tls` (= `tlr+rbr`).
    fn from_str(s: &str) -> Result<Self> {
        let mut t = Toggles::BASELINE;
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "baseline" | "none" => {}
                "clc" => t.clc = true,
                "tlr" => t.tlr = true,
                "rbr" => t.rbr = true,
                "tls" => (t.tlr, t.rbr) = (true, true),
                "all" => (t.clc, t.tlr, t.rbr) = (true, true, true),
                other => return Err(Error::Config(format!("unknown method toggle `{other}`"))),
            }
        }
        Ok(t)
    }
}

impl TryFrom<String> for Toggles {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Toggles> for String {
    fn from(t: Toggles) -> Self {
        t.label()
    }
}

impl std::fmt::Display for Toggles {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    /// The rate is multiplied by `decay_factor` after each listed epoch.
    pub decay_epochs: Vec<u32>,
    pub decay_factor: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            warmup_steps: 100,
            decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            grad_clip: 10.0,
        }
    }
}

impl OptimConfig {
    /// Learning rate for a 1-based epoch and 0-based optimizer step.
    pub fn lr_at(&self, epoch: u32, step: u64) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch > d).count();
        let warm = if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            1.0 / 3.0 + (2.0 / 3.0) * f
        } else {
            1.0
        };
        self.lr * warm * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub widths: [usize; 4],
    pub head_channels: usize,
    pub epochs: u32,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub assign: AssignConfig,
    pub toggles: Toggles,
    pub clc: ClcConfig,
    pub tls: TlsConfig,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 32, 48],
            head_channels: 32,
            epochs: 12,
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            assign: AssignConfig::default(),
            toggles: Toggles::BASELINE,
            clc: ClcConfig::default(),
            tls: TlsConfig::default(),
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.head_channels == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.batch_size == 0 {
            return Err(Error::Config("lr must be positive and batch_size >= 1".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 || o.grad_clip < 0.0 {
            return Err(Error::Config(
                "momentum in [0, 1), weight_decay and grad_clip >= 0".into(),
            ));
        }
        if !(self.clc.warmup_fraction >= 0.0 && self.clc.warmup_fraction <= 1.0) || self.clc.period == 0 {
            return Err(Error::Config("clc warmup_fraction in [0, 1] and period >= 1".into()));
        }
        self.assign.validate(Architecture::STRIDES.len())?;
        self.tls.validate()
    }

    pub fn architecture(&self, num_classes: usize) -> Architecture {
        Architecture {
            num_classes,
            widths: self.widths,
            head_channels: self.head_channels,
        }
    }
}

/// Images addressed by image id.
#[derive(Clone, Debug, Default)]
pub struct ImageStore {
    images: HashMap<u64, GrayImage>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: u64, image: GrayImage) {
        self.images.insert(image_id, image);
    }

    pub fn get(&self, image_id: u64) -> Option<&GrayImage> {
        self.images.get(&image_id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Pairs dataset images, in order, with already-rendered pixels.
    pub fn from_dataset_images(dataset: &DetDataset, images: Vec<GrayImage>) -> Result<Self> {
        if dataset.images().len() != images.len() {
            return Err(Error::Mismatch(format!(
                "{} images in dataset, {} rendered",
                dataset.images().len(),
                images.len()
            )));
        }
        let mut store = Self::new();
        for (info, img) in dataset.images().iter().zip(images) {
            store.insert(info.id, img);
        }
        Ok(store)
    }

    /// Renders every image from its `scene:<seed>:<index>` file name.
    pub fn render_scenes(dataset: &DetDataset, scene: &SceneConfig) -> Result<Self> {
        let mut store = Self::new();
        for info in dataset.images() {
            store.insert(info.id, render_key(scene, &info.file_name)?);
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub positives_per_image: f64,
    pub mean_pos_weight: f64,
    pub mean_neg_weight: f64,
    pub clc_filtered: u64,
    /// Filtered positives whose annotation was in fact class-shifted.
    pub clc_filtered_shifted: u64,
    pub seconds: f64,
}

/// Final-epoch classification weight of one location.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleWeight {
    pub key: SampleKey,
    pub assigned_gt: Option<usize>,
    pub weight: f64,
}

/// Regression targets of every image after an epoch (0 = raw annotations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSnapshot {
    pub epoch: u32,
    pub targets: BTreeMap<u64, Vec<BoundingBox>>,
}

pub struct TrainOutcome {
    pub model: Detector<f32>,
    pub config: DetectorConfig,
    pub metrics: Vec<EpochMetrics>,
    pub registry: TrendRegistry,
    pub corrector: Option<ClassAwareCorrector>,
    /// One snapshot per epoch when regeneration is on, starting at epoch 0.
    pub target_history: Vec<TargetSnapshot>,
    /// Positives, plus negatives with weight below 1, from the last epoch.
    pub final_weights: BTreeMap<u64, Vec<SampleWeight>>,
}

/// Trained weights plus the configuration that built them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: DetectorConfig,
    pub model: Detector<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::annotations::write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_metrics_jsonl(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for m in metrics {
        let line = serde_json::to_string(m)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

struct Optimizer {
    cfg: OptimConfig,
    m: Detector<f32>,
    v: Detector<f32>,
    t: i32,
}

impl Optimizer {
    fn new(cfg: OptimConfig, model: &Detector<f32>) -> Self {
        Self {
            cfg,
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Detector<f32>, grad: &Detector<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let wd = self.cfg.weight_decay as f32;
        let mu = self.cfg.momentum as f32;
        let lr32 = lr as f32;
        let layers = model.layers_mut().into_iter().zip(grad.layers());
        let states = self.m.layers_mut().into_iter().zip(self.v.layers_mut());
        for ((p, g), (m, v)) in layers.zip(states) {
            let groups = [
                (&mut p.weight, &g.weight, &mut m.weight, &mut v.weight, wd),
                (&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, 0.0),
            ];
            for (pw, gw, mw, vw, decay) in groups {
                for i in 0..pw.len() {
                    let gi = gw[i] + decay * pw[i];
                    match self.cfg.kind {
                        OptimizerKind::Sgd => {
                            mw[i] = mu * mw[i] + gi;
                            pw[i] -= lr32 * mw[i];
                        }
                        OptimizerKind::Adam => {
                            mw[i] = b1 as f32 * mw[i] + (1.0 - b1 as f32) * gi;
                            vw[i] = b2 as f32 * vw[i] + (1.0 - b2 as f32) * gi * gi;
                            let mh = mw[i] as f64 / bc1;
                            let vh = vw[i] as f64 / bc2;
                            pw[i] -= (lr * mh / (vh.sqrt() + eps)) as f32;
                        }
                    }
                }
            }
        }
    }
}

fn scale_and_clip(grad: &mut Detector<f32>, scale: f32, clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for l in grad.layers_mut() {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v *= scale;
            sq += (*v as f64) * (*v as f64);
        }
    }
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip {
        let f = (clip / norm) as f32;
        for l in grad.layers_mut() {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v *= f;
            }
        }
    }
    norm
}

struct ImageItem {
    id: u64,
    gts: Vec<BoundingBox>,
    classes: Vec<usize>,
    /// Annotation provenance says the class label was altered.
    shifted: Vec<bool>,
}

/// Per-image bookkeeping produced while building the loss plan.
#[derive(Default)]
struct WeightStats {
    pos_sum: f64,
    pos_n: usize,
    neg_sum: f64,
    neg_n: usize,
    filtered: u64,
    filtered_shifted: u64,
}

/// Everything mutable that survives across images during training.
struct TrainState {
    registry: TrendRegistry,
    regen: BoxRegenerator,
    corrector: Option<ClassAwareCorrector>,
}

/// Scores for the trend registry: assigned-class score on positives, best
/// foreground score on negatives.
fn sample_scores(outputs: &[LevelOutput<f32>], owners: &[Vec<Option<usize>>], classes: &[usize]) -> Vec<SampleScore> {
    let mut out = Vec::new();
    for (l, (o, own)) in outputs.iter().zip(owners).enumerate() {
        for (idx, owner) in own.iter().enumerate() {
            let score = match owner {
                Some(g) => sigmoid(o.logit(classes[*g], idx)),
                None => (0..o.cls.c).map(|k| sigmoid(o.logit(k, idx))).fold(0.0, f64::max),
            };
            out.push(SampleScore {
                key: o.key(l, idx),
                assigned_gt: *owner,
                score,
            });
        }
    }
    out
}

/// Builds targets and weights for one image; records scores and RBR
/// candidates as side effects.
#[allow(clippy::too_many_arguments)]
fn plan_image(
    item: &ImageItem,
    outputs: &[LevelOutput<f32>],
    epoch: u32,
    progress: f64,
    cfg: &DetectorConfig,
    state: &mut TrainState,
    stats: &mut WeightStats,
    weights_out: Option<&mut Vec<SampleWeight>>,
) -> Result<LossPlan> {
    let toggles = cfg.toggles;
    let grids: Vec<_> = outputs.iter().map(|o| o.grid).collect();
    let targets = if toggles.rbr {
        state.regen.targets(item.id).unwrap_or_else(|| item.gts.clone())
    } else {
        item.gts.clone()
    };
    let assignment = assign_samples(&targets, &grids, &cfg.assign);
    let samples = sample_scores(outputs, &assignment.levels, &item.classes);
    state.registry.record_epoch(item.id, epoch, &samples)?;

    let mut plan = LossPlan {
        levels: grids.iter().map(|g| LevelPlan::negatives(g.len())).collect(),
        normalizer: assignment.num_positives().max(1) as f64,
    };
    let positives = assignment.positives(&grids, targets.len());
    let idx_of = |k: &SampleKey| k.grid_y as usize * grids[k.level as usize].grid_w + k.grid_x as usize;
    for (g, keys) in positives.iter().enumerate() {
        for k in keys {
            let lp = &mut plan.levels[k.level as usize];
            let i = idx_of(k);
            lp.class[i] = Some(item.classes[g]);
            lp.box_target[i] = Some(targets[g]);
        }
    }

    if toggles.tlr {
        let prev_epoch = epoch.checked_sub(1);
        let prev = |key: &SampleKey| prev_epoch.and_then(|e| state.registry.score(item.id, key, e));
        for s in samples.iter().filter(|s| s.assigned_gt.is_none()) {
            if let Some(p) = prev(&s.key) {
                plan.levels[s.key.level as usize].cls_weight[idx_of(&s.key)] = negative_weight(p, s.score);
            }
        }
        for (g, keys) in positives.iter().enumerate() {
            let cur: Vec<f64> = keys
                .iter()
                .map(|k| sigmoid(outputs[k.level as usize].logit(item.classes[g], idx_of(k))))
                .collect();
            let prev_scores: Vec<Option<f64>> = keys.iter().map(&prev).collect();
            let mut w = gt_positive_weights(&prev_scores, &cur, cfg.tls.alpha);
            cfg.tls.positive_scale.apply(&mut w);
            for (k, w) in keys.iter().zip(w) {
                plan.levels[k.level as usize].cls_weight[idx_of(k)] = w;
            }
        }
    }

    if let Some(corrector) = state.corrector.as_mut() {
        let mut keys = Vec::new();
        let mut obs = Vec::new();
        for (g, ks) in positives.iter().enumerate() {
            for k in ks {
                let o = &outputs[k.level as usize];
                keys.push((*k, item.shifted[g]));
                obs.push(SampleObservation {
                    prediction: (0..o.cls.c).map(|c| sigmoid(o.logit(c, idx_of(k)))).collect(),
                    gt_class: item.classes[g],
                });
            }
        }
        let w = corrector.process_image(&obs, progress);
        for ((k, shifted), w) in keys.iter().zip(w) {
            if w == 0.0 {
                stats.filtered += 1;
                stats.filtered_shifted += u64::from(*shifted);
            }
            plan.levels[k.level as usize].cls_weight[idx_of(k)] *= w;
        }
    }

    if toggles.rbr {
        for (g, keys) in positives.iter().enumerate() {
            let cands = keys
                .iter()
                .map(|k| {
                    let o = &outputs[k.level as usize];
                    BoxCandidate {
                        key: *k,
                        score: sigmoid(o.logit(item.classes[g], idx_of(k))),
                        bbox: o.decoded(idx_of(k)),
                    }
                })
                .collect();
            state.regen.collect(item.id, g, cands);
        }
    }

    let mut dump = weights_out;
    for (l, lp) in plan.levels.iter().enumerate() {
        for (i, &w) in lp.cls_weight.iter().enumerate() {
            let positive = lp.class[i].is_some();
            if positive {
                stats.pos_sum += w;
                stats.pos_n += 1;
            } else {
                stats.neg_sum += w;
                stats.neg_n += 1;
            }
            if let Some(d) = dump.as_deref_mut() {
                if positive || w < 1.0 {
                    let key = outputs[l].key(l, i);
                    let assigned_gt = assignment.levels[l][i];
                    d.push(SampleWeight {
                        key,
                        assigned_gt,
                        weight: w,
                    });
                }
            }
        }
    }
    Ok(plan)
}

fn diverged(epoch: u32, step: usize, image_id: u64, parts: &LossBreakdown, plan: &LossPlan) -> Error {
    let ws: Vec<f64> = plan.levels.iter().flat_map(|l| l.cls_weight.iter().copied()).collect();
    let (lo, hi) = ws
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
    let mean = ws.iter().sum::<f64>() / ws.len().max(1) as f64;
    Error::Diverged {
        epoch,
        step,
        image_id,
        diagnostic: format!(
            "cls loss {}, reg loss {}, positives {}, sample weights min {lo:.4} max {hi:.4} mean {mean:.4}",
            parts.cls, parts.reg, plan.normalizer
        ),
    }
}

/// Trains a detector on `dataset`. Deterministic for a given config.
pub fn train(dataset: &DetDataset, images: &ImageStore, cfg: &DetectorConfig) -> Result<TrainOutcome> {
    train_with_observer(dataset, images, cfg, |_| {})
}

/// [`train`], calling `observer` after every epoch.
pub fn train_with_observer(
    dataset: &DetDataset,
    images: &ImageStore,
    cfg: &DetectorConfig,
    mut observer: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let num_classes = dataset.num_classes();
    if num_classes == 0 {
        return Err(Error::Empty("dataset has no categories".into()));
    }
    if dataset.images().is_empty() {
        return Err(Error::Empty("dataset has no images".into()));
    }
    let by_image = dataset.annotations_by_image();
    let mut items = Vec::with_capacity(dataset.images().len());
    for info in dataset.images() {
        if images.get(info.id).is_none() {
            return Err(Error::ImageSource(format!(
                "no pixels for image {} ({})",
                info.id, info.file_name
            )));
        }
        let anns = by_image.get(&info.id).map(Vec::as_slice).unwrap_or_default();
        items.push(ImageItem {
            id: info.id,
            gts: anns.iter().map(|a| a.bbox).collect(),
            classes: anns.iter().map(|a| a.class_id).collect(),
            shifted: anns
                .iter()
                .map(|a| {
                    matches!(
                        a.provenance,
                        Provenance::ClassShifted | Provenance::BothShiftedAndPerturbed
                    )
                })
                .collect(),
        });
    }

    let mut rng = substream(&[cfg.seed, tag::INIT]);
    let mut model = Detector::<f32>::new(cfg.architecture(num_classes), &mut rng);
    let mut optimizer = Optimizer::new(cfg.optim.clone(), &model);
    let mut grad = model.zeros_like();
    let mut state = TrainState {
        registry: TrendRegistry::new(),
        regen: BoxRegenerator::new(cfg.tls.k, cfg.tls.w1),
        corrector: if cfg.toggles.clc {
            Some(ClassAwareCorrector::new(num_classes, cfg.clc)?)
        } else {
            None
        },
    };
    let mut target_history = Vec::new();
    if cfg.toggles.rbr {
        for it in &items {
            state.regen.insert_image(it.id, it.gts.clone());
        }
        target_history.push(snapshot(&state.regen, &items, 0));
    }

    let total_steps = (items.len() as u64 * cfg.epochs as u64) as f64;
    let mut seen = 0u64;
    let mut opt_step = 0u64;
    let mut metrics = Vec::with_capacity(cfg.epochs as usize);
    let mut final_weights = BTreeMap::new();
    info!(
        "training {} params on {} images for {} epochs ({})",
        model.num_params(),
        items.len(),
        cfg.epochs,
        cfg.toggles.label()
    );

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut substream(&[cfg.seed, tag::SHUFFLE, epoch as u64]));
        let last_epoch = epoch == cfg.epochs;
        let mut sums = LossBreakdown::default();
        let mut stats = WeightStats::default();
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.optim.batch_size).enumerate() {
            for layer in grad.layers_mut() {
                layer.weight.fill(0.0);
                layer.bias.fill(0.0);
            }
            for &i in batch {
                let item = &items[i];
                let img = images.get(item.id).expect("checked above");
                let x: Tensor<f32> = image_tensor(&img.pixels, img.height as usize, img.width as usize);
                let (outputs, cache) = model.forward(&x);
                let progress = seen as f64 / total_steps;
                let mut dump = last_epoch.then(Vec::new);
                let plan = plan_image(
                    item,
                    &outputs,
                    epoch,
                    progress,
                    cfg,
                    &mut state,
                    &mut stats,
                    dump.as_mut(),
                )?;
                let (parts, head_grads) = composed_loss(&outputs, &plan, &cfg.loss);
                if !parts.total().is_finite() {
                    return Err(diverged(epoch, b, item.id, &parts, &plan));
                }
                model.backward(&cache, &head_grads, &mut grad);
                sums.cls += parts.cls;
                sums.reg += parts.reg;
                seen += 1;
                if let Some(d) = dump {
                    final_weights.insert(item.id, d);
                }
            }
            let norm = scale_and_clip(&mut grad, 1.0 / batch.len() as f32, cfg.optim.grad_clip);
            if !norm.is_finite() {
                let id = items[batch[0]].id;
                return Err(Error::Diverged {
                    epoch,
                    step: b,
                    image_id: id,
                    diagnostic: format!("non-finite gradient norm {norm}"),
                });
            }
            lr = cfg.optim.lr_at(epoch, opt_step);
            optimizer.step(&mut model, &grad, lr);
            opt_step += 1;
        }
        if cfg.toggles.rbr {
            state.regen.finish_epoch(epoch);
            target_history.push(snapshot(&state.regen, &items, epoch));
        }
        let n = items.len() as f64;
        let m = EpochMetrics {
            epoch,
            lr,
            loss: (sums.cls + sums.reg) / n,
            cls_loss: sums.cls / n,
            reg_loss: sums.reg / n,
            positives_per_image: stats.pos_n as f64 / n,
            mean_pos_weight: stats.pos_sum / stats.pos_n.max(1) as f64,
            mean_neg_weight: stats.neg_sum / stats.neg_n.max(1) as f64,
            clc_filtered: stats.filtered,
            clc_filtered_shifted: stats.filtered_shifted,
            seconds: started.elapsed().as_secs_f64(),
        };
        debug!("epoch {epoch}: {m:?}");
        observer(&m);
        metrics.push(m);
    }

    Ok(TrainOutcome {
        model,
        config: cfg.clone(),
        metrics,
        registry: state.registry,
        corrector: state.corrector,
        target_history,
        final_weights,
    })
}

fn snapshot(regen: &BoxRegenerator, items: &[ImageItem], epoch: u32) -> TargetSnapshot {
    TargetSnapshot {
        epoch,
        targets: items
            .iter()
            .filter_map(|it| regen.targets(it.id).map(|t| (it.id, t)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggle_parsing() {
        assert_eq!("baseline".parse::<Toggles>().unwrap(), Toggles::BASELINE);
        let t: Toggles = "clc+tls".parse().unwrap();
        assert!(t.clc && t.tlr && t.rbr);
        assert_eq!(t.label(), "clc+tlr+rbr");
        assert!("foo".parse::<Toggles>().is_err());
    }

    #[test]
    fn lr_schedule() {
        let o = OptimConfig {
            lr: 1.0,
            warmup_steps: 10,
            ..OptimConfig::default()
        };
        assert!((o.lr_at(1, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(o.lr_at(1, 10), 1.0);
        assert_eq!(o.lr_at(8, 100), 1.0);
        assert!((o.lr_at(9, 100) - 0.1).abs() < 1e-12);
        assert!((o.lr_at(12, 100) - 0.01).abs() < 1e-12);
    }
}
