//! Synthetic annotation noise: missing labels, extra labels, class shifts,
//! inaccurate boxes, and mixtures of them.
//!
//! Sampled noise types corrupt exactly `round_half_even(a * N)` annotations.
//! Box noise perturbs every annotation with
//!
//! ```text
//! cx' = cx + dx * w     cy' = cy + dy * h
//! w'  = (1 + dw) * w    h'  = (1 + dh) * h      d* ~ U(-a, a)
//! ```
//!
//! followed by clamping to the image and a 1-pixel minimum side.
//!
//! All randomness comes from per-annotation substreams keyed by
//! `(seed, kind, image_id, annotation_id)`, so the selection is independent
//! of the order images or annotations appear in the input file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, BoundingBox, DetDataset, ImageInfo, Provenance};
use crate::error::{Error, Result};
use crate::rng::{substream, tag};

/// Extra boxes are drawn log-uniform between these side lengths (pixels).
pub const EXTRA_MIN_SIDE: f64 = 2.0;
pub const EXTRA_MAX_SIDE: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Missing,
    Extra,
    ClassShift,
    Box,
    Mixed,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Missing => "missing",
            NoiseKind::Extra => "extra",
            NoiseKind::ClassShift => "class_shift",
            NoiseKind::Box => "box",
            NoiseKind::Mixed => "mixed",
        }
    }

    /// Application order inside a mixture.
    fn mixing_rank(self) -> u8 {
        match self {
            NoiseKind::Missing => 0,
            NoiseKind::Extra => 1,
            NoiseKind::ClassShift => 2,
            NoiseKind::Box => 3,
            NoiseKind::Mixed => 4,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "missing" => NoiseKind::Missing,
            "extra" => NoiseKind::Extra,
            "class_shift" | "class-shift" | "class" => NoiseKind::ClassShift,
            "box" => NoiseKind::Box,
            "mixed" => NoiseKind::Mixed,
            other => return Err(Error::Config(format!("unknown noise kind `{other}`"))),
        })
    }
}

/// Which noise to synthesize, at what level, from which seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Fraction in `[0, 1]`.
    pub level: f64,
    pub seed: u64,
    /// Components of a mixture; empty unless `kind` is `Mixed`.
    #[serde(default)]
    pub mixed_components: Vec<(NoiseKind, f64)>,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, level: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            level,
            seed,
            mixed_components: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mixed(components: Vec<(NoiseKind, f64)>, seed: u64) -> Result<Self> {
        let level = components.iter().map(|c| c.1).fold(0.0, f64::max);
        let spec = Self {
            kind: NoiseKind::Mixed,
            level,
            seed,
            mixed_components: components,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_level(self.level)?;
        match self.kind {
            NoiseKind::Mixed => {
                if self.mixed_components.is_empty() {
                    return Err(Error::Config("mixed noise needs at least one component".into()));
                }
                let mut seen = HashSet::new();
                for &(k, a) in &self.mixed_components {
                    if k == NoiseKind::Mixed {
                        return Err(Error::Config("mixed components cannot nest".into()));
                    }
                    if !seen.insert(k) {
                        return Err(Error::Config(format!("duplicate mixed component `{k}`")));
                    }
                    check_level(a)?;
                }
            }
            _ if !self.mixed_components.is_empty() => {
                return Err(Error::Config("mixed_components is only valid for mixed noise".into()));
            }
            _ => {}
        }
        Ok(())
    }

    fn component(&self, kind: NoiseKind, level: f64) -> NoiseSpec {
        NoiseSpec {
            kind,
            level,
            seed: self.seed,
            mixed_components: Vec::new(),
        }
    }
}

fn check_level(a: f64) -> Result<()> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(Error::Config(format!("noise level {a} outside [0, 1]")))
    }
}

/// One Eq.-style box perturbation draw; each component lies in `(-a, a)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbationDraw {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl PerturbationDraw {
    pub fn sample<R: Rng>(rng: &mut R, level: f64) -> Self {
        let mut draw = || {
            if level <= 0.0 {
                return 0.0;
            }
            loop {
                let v = rng.gen_range(-level..level);
                if v > -level {
                    return v;
                }
            }
        };
        Self {
            dx: draw(),
            dy: draw(),
            dw: draw(),
            dh: draw(),
        }
    }

    /// Applies the perturbation to a center-form box (no clamping).
    pub fn apply(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            cx: b.cx + self.dx * b.w,
            cy: b.cy + self.dy * b.h,
            w: (1.0 + self.dw) * b.w,
            h: (1.0 + self.dh) * b.h,
        }
    }
}

/// A noisy dataset plus the ids of the annotations that were touched.
///
/// For missing labels the audit lists removed ids; for extra labels the ids
/// of the appended annotations; otherwise the ids whose class or box changed.
#[derive(Clone, Debug)]
pub struct NoiseOutcome {
    pub dataset: DetDataset,
    pub audit: Vec<u64>,
}

/// `round(a * n)` with ties to even.
pub fn noisy_count(level: f64, n: usize) -> usize {
    (level * n as f64).round_ties_even() as usize
}

/// Selects `round(a * N)` annotations uniformly without replacement.
///
/// Each annotation gets a key from its own substream; the smallest keys win.
fn select(ds: &DetDataset, level: f64, seed: u64, kind_tag: u64) -> HashSet<u64> {
    let anns = ds.annotations();
    let m = noisy_count(level, anns.len());
    let mut keyed: Vec<(u64, u64, u64)> = anns
        .iter()
        .map(|a| {
            let key: u64 = substream(&[seed, kind_tag, a.image_id, a.id, 0]).gen();
            (key, a.image_id, a.id)
        })
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().take(m).map(|(_, _, id)| id).collect()
}

fn expect_kind(spec: &NoiseSpec, kind: NoiseKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != kind {
        return Err(Error::Config(format!("expected a `{kind}` spec, got `{}`", spec.kind)));
    }
    Ok(())
}

/// Removes `round(a * N)` annotations (their objects become background).
pub fn inject_missing(ds: &DetDataset, spec: &NoiseSpec) -> Result<NoiseOutcome> {
    expect_kind(spec, NoiseKind::Missing)?;
    let chosen = select(ds, spec.level, spec.seed, tag::MISSING);
    if !ds.annotations().is_empty() && chosen.len() == ds.annotations().len() {
        warn!("missing-label noise removed every annotation");
    }
    let mut audit: Vec<u64> = chosen.iter().copied().collect();
    audit.sort_unstable();
    let kept = ds
        .annotations()
        .iter()
        .filter(|a| !chosen.contains(&a.id))
        .cloned()
        .collect();
    Ok(NoiseOutcome {
        dataset: ds.with_annotations(kept)?,
        audit,
    })
}

/// Relabels `round(a * N)` annotations to a different foreground class.
pub fn inject_class_shift(ds: &DetDataset, spec: &NoiseSpec) -> Result<NoiseOutcome> {
    expect_kind(spec, NoiseKind::ClassShift)?;
    let c = ds.num_classes();
    let chosen = select(ds, spec.level, spec.seed, tag::CLASS_SHIFT);
    if c < 2 && !chosen.is_empty() {
        return Err(Error::Unsatisfiable(format!(
            "class shift needs at least 2 foreground classes, dataset has {c}"
        )));
    }
    let mut audit = Vec::with_capacity(chosen.len());
    let anns = ds
        .annotations()
        .iter()
        .map(|a| {
            if !chosen.contains(&a.id) {
                return a.clone();
            }
            let mut rng = substream(&[spec.seed, tag::CLASS_SHIFT, a.image_id, a.id, 1]);
            let r = rng.gen_range(0..c - 1);
            let new_class = if r >= a.class_id { r + 1 } else { r };
            audit.push(a.id);
            Annotation {
                class_id: new_class,
                provenance: match a.provenance {
                    Provenance::BoxPerturbed | Provenance::BothShiftedAndPerturbed => {
                        Provenance::BothShiftedAndPerturbed
                    }
                    _ => Provenance::ClassShifted,
                },
                ..a.clone()
            }
        })
        .collect();
    audit.sort_unstable();
    Ok(NoiseOutcome {
        dataset: ds.with_annotations(anns)?,
        audit,
    })
}

/// Appends `round(a * N)` random boxes with random foreground labels.
///
/// Host images are chosen proportionally to their annotation count; the box
/// side is log-uniform in `[2, 16]` px and the box lies fully in the image.
pub fn inject_extra(ds: &DetDataset, spec: &NoiseSpec) -> Result<NoiseOutcome> {
    expect_kind(spec, NoiseKind::Extra)?;
    let m = noisy_count(spec.level, ds.annotations().len());
    if m == 0 {
        return Ok(NoiseOutcome {
            dataset: ds.clone(),
            audit: Vec::new(),
        });
    }
    if ds.images().is_empty() {
        return Err(Error::Empty("extra-label noise needs at least one image".into()));
    }
    let c = ds.num_classes();
    if c == 0 {
        return Err(Error::Unsatisfiable("dataset has no foreground classes".into()));
    }

    let mut images: Vec<&ImageInfo> = ds.images().iter().collect();
    images.sort_by_key(|im| im.id);
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for a in ds.annotations() {
        *counts.entry(a.image_id).or_default() += 1;
    }
    let cumulative: Vec<usize> = images
        .iter()
        .scan(0usize, |acc, im| {
            *acc += counts.get(&im.id).copied().unwrap_or(0);
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap();

    let next_id = ds.max_annotation_id().map_or(0, |m| m + 1);
    let mut anns = ds.annotations().to_vec();
    let mut audit = Vec::with_capacity(m);
    for j in 0..m as u64 {
        let mut rng = substream(&[spec.seed, tag::EXTRA, j]);
        let pick = rng.gen_range(0..total);
        let slot = cumulative.partition_point(|&c| c <= pick);
        let im = images[slot];
        let (width, height) = (im.width as f64, im.height as f64);

        let side = |rng: &mut rand_chacha::ChaCha8Rng, limit: f64| {
            let s = rng.gen_range(EXTRA_MIN_SIDE.ln()..=EXTRA_MAX_SIDE.ln()).exp();
            s.min(limit)
        };
        let w = side(&mut rng, width);
        let h = side(&mut rng, height);
        let cx = if width > w {
            rng.gen_range(w / 2.0..=width - w / 2.0)
        } else {
            width / 2.0
        };
        let cy = if height > h {
            rng.gen_range(h / 2.0..=height - h / 2.0)
        } else {
            height / 2.0
        };
        let id = next_id + j;
        anns.push(Annotation {
            id,
            image_id: im.id,
            bbox: BoundingBox::new(cx, cy, w, h),
            class_id: rng.gen_range(0..c),
            provenance: Provenance::Extra,
        });
        audit.push(id);
    }
    Ok(NoiseOutcome {
        dataset: ds.with_annotations(anns)?,
        audit,
    })
}

/// Perturbs every box with independent uniform offsets in `(-a, a)`.
pub fn inject_box_noise(ds: &DetDataset, spec: &NoiseSpec) -> Result<NoiseOutcome> {
    expect_kind(spec, NoiseKind::Box)?;
    if spec.level >= 1.0 {
        return Err(Error::Config(
            "box noise level must be < 1 so widths stay positive".into(),
        ));
    }
    let sizes: HashMap<u64, (f64, f64)> = ds
        .images()
        .iter()
        .map(|im| (im.id, (im.width as f64, im.height as f64)))
        .collect();
    let mut clamped = 0usize;
    let mut audit = Vec::new();
    let anns = ds
        .annotations()
        .iter()
        .map(|a| {
            let mut rng = substream(&[spec.seed, tag::BOX, a.image_id, a.id]);
            let draw = PerturbationDraw::sample(&mut rng, spec.level);
            let (w, h) = sizes[&a.image_id];
            let (bbox, changed) = draw.apply(&a.bbox).clamp_to_image(w, h);
            clamped += changed as usize;
            if bbox != a.bbox {
                audit.push(a.id);
            }
            let provenance = match a.provenance {
                Provenance::Clean | Provenance::BoxPerturbed => Provenance::BoxPerturbed,
                Provenance::ClassShifted | Provenance::BothShiftedAndPerturbed => Provenance::BothShiftedAndPerturbed,
                Provenance::Extra => Provenance::Extra,
            };
            Annotation {
                bbox,
                provenance,
                ..a.clone()
            }
        })
        .collect();
    if clamped > 0 {
        warn!("box noise: {clamped} perturbed boxes were clamped to the image");
    }
    audit.sort_unstable();
    Ok(NoiseOutcome {
        dataset: ds.with_annotations(anns)?,
        audit,
    })
}

/// Applies each component in the fixed order missing, extra, class shift,
/// box. Each component's budget is computed against the dataset it receives.
pub fn inject_mixed(ds: &DetDataset, spec: &NoiseSpec) -> Result<NoiseOutcome> {
    expect_kind(spec, NoiseKind::Mixed)?;
    let mut components = spec.mixed_components.clone();
    components.sort_by_key(|(k, _)| k.mixing_rank());
    let mut current = ds.clone();
    let mut audit = Vec::new();
    for (kind, level) in components {
        let out = synthesize(&current, &spec.component(kind, level))?;
        current = out.dataset;
        audit.extend(out.audit);
    }
    audit.sort_unstable();
    audit.dedup();
    Ok(NoiseOutcome {
        dataset: current,
        audit,
    })
}

/// Dispatches on `spec.kind`.
pub fn synthesize(ds: &DetDataset, spec: &NoiseSpec) -> Result<NoiseOutcome> {
    match spec.kind {
        NoiseKind::Missing => inject_missing(ds, spec),
        NoiseKind::Extra => inject_extra(ds, spec),
        NoiseKind::ClassShift => inject_class_shift(ds, spec),
        NoiseKind::Box => inject_box_noise(ds, spec),
        NoiseKind::Mixed => inject_mixed(ds, spec),
    }
}

// ---------------------------------------------------------------------------
// Reporting

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let t = ((v - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        let i = (t.max(0.0) as usize).min(bins - 1);
        self.counts[i] += 1;
    }
}

/// Achieved corruption statistics of a noisy dataset against its clean source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub clean_count: usize,
    pub noisy_count: usize,
    pub missing: usize,
    pub extra: usize,
    pub class_shifted: usize,
    pub box_perturbed: usize,
    pub missing_rate: f64,
    pub extra_rate: f64,
    pub class_shift_rate: f64,
    pub box_rate: f64,
    /// `confusion[old][new]` counts of shifted labels.
    pub shift_confusion: Vec<Vec<usize>>,
    /// Largest relative offsets `|dx|, |dy|, |dw|, |dh|` among kept boxes.
    pub max_abs_offset: [f64; 4],
    pub offset_histograms: [Histogram; 4],
}

pub fn noise_report(clean: &DetDataset, noisy: &DetDataset) -> Result<NoiseReport> {
    let ids = |d: &DetDataset| d.images().iter().map(|im| im.id).collect::<HashSet<_>>();
    if ids(clean) != ids(noisy) {
        return Err(Error::Mismatch(
            "clean and noisy datasets cover different image sets".into(),
        ));
    }
    let c = clean.num_classes();
    if noisy.num_classes() != c {
        return Err(Error::Mismatch("category lists differ".into()));
    }
    let noisy_by_id: BTreeMap<u64, &Annotation> = noisy.annotations().iter().map(|a| (a.id, a)).collect();
    let clean_ids: HashSet<u64> = clean.annotations().iter().map(|a| a.id).collect();

    let mut report = NoiseReport {
        clean_count: clean.annotations().len(),
        noisy_count: noisy.annotations().len(),
        missing: 0,
        extra: noisy
            .annotations()
            .iter()
            .filter(|a| !clean_ids.contains(&a.id))
            .count(),
        class_shifted: 0,
        box_perturbed: 0,
        missing_rate: 0.0,
        extra_rate: 0.0,
        class_shift_rate: 0.0,
        box_rate: 0.0,
        shift_confusion: vec![vec![0; c]; c],
        max_abs_offset: [0.0; 4],
        offset_histograms: std::array::from_fn(|_| Histogram::new(-1.0, 1.0, 40)),
    };
    for a in clean.annotations() {
        let Some(b) = noisy_by_id.get(&a.id) else {
            report.missing += 1;
            continue;
        };
        if b.class_id != a.class_id {
            report.class_shifted += 1;
            report.shift_confusion[a.class_id][b.class_id] += 1;
        }
        let offsets = [
            (b.bbox.cx - a.bbox.cx) / a.bbox.w,
            (b.bbox.cy - a.bbox.cy) / a.bbox.h,
            b.bbox.w / a.bbox.w - 1.0,
            b.bbox.h / a.bbox.h - 1.0,
        ];
        if offsets.iter().any(|o| o.abs() > 1e-12) {
            report.box_perturbed += 1;
        }
        for (k, o) in offsets.iter().enumerate() {
            report.max_abs_offset[k] = report.max_abs_offset[k].max(o.abs());
            report.offset_histograms[k].add(*o);
        }
    }
    let n = report.clean_count as f64;
    let rate = |k: usize| if n > 0.0 { k as f64 / n } else { 0.0 };
    report.missing_rate = rate(report.missing);
    report.extra_rate = rate(report.extra);
    report.class_shift_rate = rate(report.class_shifted);
    report.box_rate = rate(report.box_perturbed);
    Ok(report)
}

impl fmt::Display for NoiseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "annotations: {} clean -> {} noisy",
            self.clean_count, self.noisy_count
        )?;
        writeln!(f, "{:<14} {:>8} {:>8}", "noise", "count", "rate")?;
        for (name, count, rate) in [
            ("missing", self.missing, self.missing_rate),
            ("extra", self.extra, self.extra_rate),
            ("class_shift", self.class_shifted, self.class_shift_rate),
            ("box", self.box_perturbed, self.box_rate),
        ] {
            writeln!(f, "{name:<14} {count:>8} {rate:>8.4}")?;
        }
        let [dx, dy, dw, dh] = self.max_abs_offset;
        writeln!(f, "max |dx| {dx:.4}  |dy| {dy:.4}  |dw| {dw:.4}  |dh| {dh:.4}")?;
        if self.class_shifted > 0 {
            writeln!(f, "shift confusion (row = clean class, col = noisy class):")?;
            for row in &self.shift_confusion {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
                writeln!(f, "{}", cells.join(""))?;
            }
        }
        Ok(())
    }
}
