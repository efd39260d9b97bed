//! Procedural tiny-shapes scenes.
//!
//! Each scene is a grayscale image with a textured background, a few
//! distractor blobs, and a handful of small filled shapes whose classes follow
//! a long-tailed frequency table. Scenes are a pure function of
//! `(seed, index)`.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, BoundingBox, Category, DetDataset, ImageInfo, Provenance};
use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::toydet::nn::standard_normal;

/// Largest object side allowed in a scene, in pixels.
pub const TINY_LIMIT: f64 = 16.0;

/// Shape archetypes; the first `num_classes` are used.
pub const ARCHETYPES: [&str; 8] = ["disk", "square", "cross", "bar", "triangle", "ring", "diamond", "frame"];

/// Per-archetype brightness offset in `[-1, 1]`, scaled by `class_contrast`.
const ARCHETYPE_TONE: [f64; 8] = [1.0, -1.0, 0.43, -0.43, 0.71, -0.71, 0.14, -0.14];

const MAX_PLACEMENT_TRIES: usize = 64;
const MAX_OVERLAP_IOU: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: u32,
    pub num_classes: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (u32, u32),
    /// Inclusive range of the longer object side, in pixels.
    pub size_range: (f64, f64),
    /// Relative class frequencies (normalized internally).
    pub class_frequency: Vec<f64>,
    /// Background texture and distractor intensity, `[0, 1]`.
    pub clutter: f64,
    /// How much of the object brightness is fixed by its class, `[0, 1]`.
    /// At 0 classes differ by shape alone.
    pub class_contrast: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            num_classes: 6,
            objects_per_image: (4, 12),
            size_range: (4.0, 16.0),
            class_frequency: vec![0.30, 0.24, 0.18, 0.13, 0.09, 0.06],
            clutter: 0.3,
            class_contrast: 0.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > ARCHETYPES.len() {
            return fail(format!("num_classes must be in 1..={}", ARCHETYPES.len()));
        }
        if self.class_frequency.len() != self.num_classes {
            return fail("class_frequency must have one entry per class".into());
        }
        if self.class_frequency.iter().any(|&f| !(f >= 0.0)) || self.class_frequency.iter().sum::<f64>() <= 0.0 {
            return fail("class_frequency must be non-negative with a positive sum".into());
        }
        let (lo, hi) = self.size_range;
        if !(lo >= 2.0 && lo <= hi && hi <= TINY_LIMIT) {
            return fail(format!("size_range must satisfy 2 <= lo <= hi <= {TINY_LIMIT}"));
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return fail("objects_per_image range is inverted".into());
        }
        if (self.image_size as f64) < 2.0 * hi {
            return fail("image_size too small for the object sizes".into());
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return fail("clutter must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.class_contrast) {
            return fail("class_contrast must be in [0, 1]".into());
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<Category> {
        (0..self.num_classes)
            .map(|i| Category {
                id: i as u64,
                name: ARCHETYPES[i].to_string(),
            })
            .collect()
    }

    pub fn normalized_frequency(&self) -> Vec<f64> {
        let total: f64 = self.class_frequency.iter().sum();
        self.class_frequency.iter().map(|f| f / total).collect()
    }

    /// Generator key stored as the image `file_name`.
    pub fn scene_key(&self, index: u64) -> String {
        format!("scene:{}:{}", self.seed, index)
    }
}

/// Grayscale image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    fn filled(width: u32, height: u32, v: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![v; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.pixels[(y * self.width + x) as usize]
    }
}

/// An object placed in a scene, before it becomes an annotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub objects: Vec<SceneObject>,
}

/// Renders scene `index` of the configuration.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Scene {
    let mut rng = substream(&[cfg.seed, tag::SCENE, index]);
    let size = cfg.image_size;
    let s = size as f64;

    let base: f64 = rng.gen_range(0.15..0.35);
    let mut image = GrayImage::filled(size, size, base as f32);

    // Smooth background texture from a few broad Gaussian bumps.
    let bumps = 3 + (cfg.clutter * 6.0) as usize;
    for _ in 0..bumps {
        let (bx, by) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let sigma = rng.gen_range(s * 0.08..s * 0.3);
        let amp = cfg.clutter * rng.gen_range(-0.15..0.15);
        add_blob(&mut image, bx, by, sigma, amp);
    }

    let freq = cfg.normalized_frequency();
    let (lo_n, hi_n) = cfg.objects_per_image;
    let target = rng.gen_range(lo_n..=hi_n) as usize;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(target);
    for _ in 0..target {
        let class_id = sample_class(&freq, &mut rng);
        let long = log_uniform(&mut rng, cfg.size_range.0, cfg.size_range.1);
        let (w, h) = shape_extent(class_id, long, &mut rng);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let cx = rng.gen_range(w / 2.0 + 1.0..=s - w / 2.0 - 1.0);
            let cy = rng.gen_range(h / 2.0 + 1.0..=s - h / 2.0 - 1.0);
            let bbox = BoundingBox::new(cx, cy, w, h);
            if objects.iter().all(|o| o.bbox.iou(&bbox) < MAX_OVERLAP_IOU) {
                placed = Some(bbox);
                break;
            }
        }
        match placed {
            Some(bbox) => objects.push(SceneObject { class_id, bbox }),
            None => debug!("scene {index}: could not place object {}", objects.len()),
        }
    }

    // Distractors: small soft spots that belong to no class.
    let distractors = (cfg.clutter * 8.0).round() as usize;
    for _ in 0..distractors {
        let (dx, dy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let sigma = rng.gen_range(0.8..2.0);
        let amp = rng.gen_range(0.15..0.4);
        add_blob(&mut image, dx, dy, sigma, amp);
    }

    for o in &objects {
        let jitter = 0.15 * (1.0 - cfg.class_contrast);
        let tone = 0.15 * cfg.class_contrast * ARCHETYPE_TONE[o.class_id];
        let level = base + 0.5 + tone + rng.gen_range(-1.0..1.0) * jitter;
        paint_shape(&mut image, o, level);
    }

    let noise = 0.02 + 0.04 * cfg.clutter;
    for p in &mut image.pixels {
        *p = (*p as f64 + noise * standard_normal(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    Scene { image, objects }
}

/// Renders the image named by a `scene:<seed>:<index>` key.
pub fn render_key(cfg: &SceneConfig, key: &str) -> Result<GrayImage> {
    let mut parts = key.split(':');
    let (Some("scene"), Some(seed), Some(index), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(Error::ImageSource(key.to_string()));
    };
    let seed: u64 = seed.parse().map_err(|_| Error::ImageSource(key.to_string()))?;
    let index: u64 = index.parse().map_err(|_| Error::ImageSource(key.to_string()))?;
    if seed != cfg.seed {
        return Err(Error::Config(format!(
            "image key `{key}` was generated with seed {seed}, scene config has {}",
            cfg.seed
        )));
    }
    Ok(generate_scene(cfg, index).image)
}

/// Scenes `start..start + count` as a clean dataset plus their images.
pub fn build_dataset(cfg: &SceneConfig, start: u64, count: u64) -> Result<(DetDataset, Vec<GrayImage>)> {
    cfg.validate()?;
    let mut images = Vec::with_capacity(count as usize);
    let mut infos = Vec::with_capacity(count as usize);
    let mut anns = Vec::new();
    let mut next_id = 0u64;
    for index in start..start + count {
        let scene = generate_scene(cfg, index);
        infos.push(ImageInfo {
            id: index,
            width: cfg.image_size,
            height: cfg.image_size,
            file_name: cfg.scene_key(index),
        });
        for o in &scene.objects {
            anns.push(Annotation {
                id: next_id,
                image_id: index,
                bbox: o.bbox,
                class_id: o.class_id,
                provenance: Provenance::Clean,
            });
            next_id += 1;
        }
        images.push(scene.image);
    }
    Ok((DetDataset::new(cfg.categories(), infos, anns)?, images))
}

fn sample_class<R: Rng>(freq: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, f) in freq.iter().enumerate() {
        acc += f;
        if u < acc {
            return i;
        }
    }
    freq.len() - 1
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo.ln()..=hi.ln()).exp()
}

/// Box extent for a class given its long side.
fn shape_extent<R: Rng>(class_id: usize, long: f64, rng: &mut R) -> (f64, f64) {
    if ARCHETYPES[class_id] == "bar" {
        let short = (long / 3.0).max(2.0);
        if rng.gen_bool(0.5) {
            (long, short)
        } else {
            (short, long)
        }
    } else {
        (long, long)
    }
}

/// Membership test in normalized coordinates `u, v` in `[-1, 1]`.
fn inside(class_id: usize, u: f64, v: f64) -> bool {
    if u.abs() > 1.0 || v.abs() > 1.0 {
        return false;
    }
    match ARCHETYPES[class_id] {
        "disk" => u * u + v * v <= 1.0,
        "square" | "bar" => true,
        "cross" => u.abs() <= 0.34 || v.abs() <= 0.34,
        "triangle" => u.abs() <= (v + 1.0) / 2.0,
        "ring" => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        "diamond" => u.abs() + v.abs() <= 1.0,
        "frame" => u.abs() >= 0.5 || v.abs() >= 0.5,
        _ => unreachable!(),
    }
}

/// Paints a shape with 4x4 supersampled coverage.
fn paint_shape(image: &mut GrayImage, o: &SceneObject, level: f64) {
    const SS: usize = 4;
    let [x1, y1, x2, y2] = o.bbox.to_xyxy();
    let (hw, hh) = (o.bbox.w / 2.0, o.bbox.h / 2.0);
    let px0 = x1.floor().max(0.0) as u32;
    let py0 = y1.floor().max(0.0) as u32;
    let px1 = (x2.ceil() as u32).min(image.width);
    let py1 = (y2.ceil() as u32).min(image.height);
    for py in py0..py1 {
        for px in px0..px1 {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                    if inside(o.class_id, (x - o.bbox.cx) / hw, (y - o.bbox.cy) / hh) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cov = hits as f64 / (SS * SS) as f64;
                let i = (py * image.width + px) as usize;
                let bg = image.pixels[i] as f64;
                image.pixels[i] = ((1.0 - cov) * bg + cov * level) as f32;
            }
        }
    }
}

fn add_blob(image: &mut GrayImage, cx: f64, cy: f64, sigma: f64, amp: f64) {
    let r = (3.0 * sigma).ceil();
    let x0 = (cx - r).floor().max(0.0) as u32;
    let y0 = (cy - r).floor().max(0.0) as u32;
    let x1 = ((cx + r).ceil() as u32).min(image.width);
    let y1 = ((cy + r).ceil() as u32).min(image.height);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let i = (y * image.width + x) as usize;
            image.pixels[i] += (amp * (-(dx * dx + dy * dy) * inv).exp()) as f32;
        }
    }
}
