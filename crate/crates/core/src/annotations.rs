//! Canonical detection-dataset model and COCO-style persistence.
//!
//! Boxes are held in center form `(cx, cy, w, h)`; the file format uses the
//! COCO corner form `[x_min, y_min, w, h]`. Noise provenance never enters the
//! main annotation file. It lives in a `<path>.provenance.json` sidecar keyed
//! by annotation id, so corrupted files stay drop-in replacements for tooling
//! that knows nothing about provenance.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side length a box may have after any operation.
pub const MIN_BOX_SIDE: f64 = 1.0;

/// Axis-aligned box in center form, pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "degenerate box {w}x{h}");
        Self { cx, cy, w, h }
    }

    /// From COCO corner form `[x_min, y_min, w, h]`.
    pub fn from_corner(x_min: f64, y_min: f64, w: f64, h: f64) -> Self {
        Self {
            cx: x_min + w / 2.0,
            cy: y_min + h / 2.0,
            w,
            h,
        }
    }

    /// To COCO corner form `[x_min, y_min, w, h]`.
    pub fn to_corner(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn from_xyxy(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn to_xyxy(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Geometric-mean side length, used for size buckets.
    pub fn side(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let a = self.to_xyxy();
        let b = other.to_xyxy();
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    /// Clips the box to `[0, width] x [0, height]` and enforces the 1-pixel
    /// minimum side. Returns the clamped box and whether anything changed.
    pub fn clamp_to_image(&self, width: f64, height: f64) -> (BoundingBox, bool) {
        let [x1, y1, x2, y2] = self.to_xyxy();
        let (nx1, nx2) = clamp_interval(x1, x2, width);
        let (ny1, ny2) = clamp_interval(y1, y2, height);
        if (nx1, ny1, nx2, ny2) == (x1, y1, x2, y2) {
            return (*self, false);
        }
        (BoundingBox::from_xyxy(nx1, ny1, nx2, ny2), true)
    }
}

fn clamp_interval(lo: f64, hi: f64, limit: f64) -> (f64, f64) {
    let mut a = lo.clamp(0.0, limit);
    let mut b = hi.clamp(0.0, limit);
    if b - a < MIN_BOX_SIDE {
        let mid = ((a + b) / 2.0).clamp(MIN_BOX_SIDE / 2.0, limit - MIN_BOX_SIDE / 2.0);
        a = mid - MIN_BOX_SIDE / 2.0;
        b = mid + MIN_BOX_SIDE / 2.0;
    }
    (a, b)
}

/// Which corruption, if any, produced an annotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Clean,
    ClassShifted,
    BoxPerturbed,
    Extra,
    BothShiftedAndPerturbed,
}

impl Provenance {
    pub fn is_clean(self) -> bool {
        self == Provenance::Clean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    /// Category id as written in the file.
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    /// File path, or a generator key for procedurally rendered scenes.
    pub file_name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub bbox: BoundingBox,
    /// Index into the dataset's category list, in `[0, C)`.
    pub class_id: usize,
    pub provenance: Provenance,
}

/// A validated detection dataset. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct DetDataset {
    categories: Vec<Category>,
    images: Vec<ImageInfo>,
    annotations: Vec<Annotation>,
}

impl DetDataset {
    pub fn new(categories: Vec<Category>, images: Vec<ImageInfo>, annotations: Vec<Annotation>) -> Result<Self> {
        let ds = Self {
            categories,
            images,
            annotations,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Same categories and images, new annotation list.
    pub fn with_annotations(&self, annotations: Vec<Annotation>) -> Result<Self> {
        Self::new(self.categories.clone(), self.images.clone(), annotations)
    }

    fn validate(&self) -> Result<()> {
        let mut seen_cat = HashSet::new();
        for c in &self.categories {
            if !seen_cat.insert(c.id) {
                return Err(Error::Integrity(format!("duplicate category id {}", c.id)));
            }
        }
        let mut image_ids = HashSet::new();
        for im in &self.images {
            if !image_ids.insert(im.id) {
                return Err(Error::Integrity(format!("duplicate image id {}", im.id)));
            }
        }
        let mut ann_ids = HashSet::new();
        let mut dup_ids = Vec::new();
        let mut dangling_images = Vec::new();
        let mut dangling_classes = Vec::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                dup_ids.push(a.id);
            }
            if !image_ids.contains(&a.image_id) {
                dangling_images.push(a.image_id);
            }
            if a.class_id >= self.categories.len() {
                dangling_classes.push(a.class_id);
            }
        }
        if !dup_ids.is_empty() {
            return Err(Error::Integrity(format!("duplicate annotation ids {dup_ids:?}")));
        }
        if !dangling_images.is_empty() {
            dangling_images.sort_unstable();
            dangling_images.dedup();
            return Err(Error::Integrity(format!(
                "annotations reference unknown image ids {dangling_images:?}"
            )));
        }
        if !dangling_classes.is_empty() {
            dangling_classes.sort_unstable();
            dangling_classes.dedup();
            return Err(Error::Integrity(format!(
                "annotations reference unknown class ids {dangling_classes:?}"
            )));
        }
        Ok(())
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|im| im.id == id)
    }

    /// Annotations grouped by image id, each group in input order.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut map: BTreeMap<u64, Vec<&Annotation>> = self.images.iter().map(|im| (im.id, Vec::new())).collect();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }

    pub fn max_annotation_id(&self) -> Option<u64> {
        self.annotations.iter().map(|a| a.id).max()
    }
}

// ---------------------------------------------------------------------------
// COCO-style file format

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    category_id: u64,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Path of the provenance sidecar for an annotation file.
pub fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        key: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Reads a COCO-style annotation file (and its provenance sidecar, if any).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DetDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CocoFile = parse_json(path, &text)?;

    let class_of: HashMap<u64, usize> = file.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

    let sidecar = provenance_path(path);
    let provenance: HashMap<u64, Provenance> = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let raw: BTreeMap<String, Provenance> = parse_json(&sidecar, &text)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.parse::<u64>().map(|id| (id, v)).map_err(|_| Error::Parse {
                    path: sidecar.clone(),
                    key: k.clone(),
                    message: "provenance keys must be annotation ids".into(),
                })
            })
            .collect::<Result<_>>()?
    } else {
        HashMap::new()
    };

    let mut unknown_categories = Vec::new();
    let mut annotations = Vec::with_capacity(file.annotations.len());
    for a in &file.annotations {
        let Some(&class_id) = class_of.get(&a.category_id) else {
            unknown_categories.push(a.category_id);
            continue;
        };
        let [x, y, mut w, mut h] = a.bbox;
        if !(w > 0.0 && h > 0.0) {
            warn!(
                "annotation {} has degenerate bbox {:?}; clamping to {MIN_BOX_SIDE} px",
                a.id, a.bbox
            );
            w = w.max(MIN_BOX_SIDE);
            h = h.max(MIN_BOX_SIDE);
        }
        annotations.push(Annotation {
            id: a.id,
            image_id: a.image_id,
            bbox: BoundingBox::from_corner(x, y, w, h),
            class_id,
            provenance: provenance.get(&a.id).copied().unwrap_or_default(),
        });
    }
    if !unknown_categories.is_empty() {
        unknown_categories.sort_unstable();
        unknown_categories.dedup();
        return Err(Error::Integrity(format!(
            "annotations reference unknown category ids {unknown_categories:?}"
        )));
    }

    let categories = file
        .categories
        .into_iter()
        .map(|c| Category { id: c.id, name: c.name })
        .collect();
    let images = file
        .images
        .into_iter()
        .map(|im| ImageInfo {
            id: im.id,
            width: im.width,
            height: im.height,
            file_name: im.file_name,
        })
        .collect();
    DetDataset::new(categories, images, annotations)
}

/// Writes `ds` as COCO-style JSON plus the provenance sidecar.
///
/// The sidecar lists exactly the non-clean annotation ids. It is always
/// written (possibly empty) so a stale sidecar never outlives its file.
pub fn save_dataset(ds: &DetDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CocoFile {
        images: ds
            .images
            .iter()
            .map(|im| CocoImage {
                id: im.id,
                width: im.width,
                height: im.height,
                file_name: im.file_name.clone(),
            })
            .collect(),
        annotations: ds
            .annotations
            .iter()
            .map(|a| CocoAnnotation {
                id: a.id,
                image_id: a.image_id,
                bbox: a.bbox.to_corner(),
                category_id: ds.categories[a.class_id].id,
            })
            .collect(),
        categories: ds
            .categories
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
    };
    let sidecar: BTreeMap<u64, Provenance> = ds
        .annotations
        .iter()
        .filter(|a| !a.provenance.is_clean())
        .map(|a| (a.id, a.provenance))
        .collect();

    write_json(path, &file)?;
    write_json(&provenance_path(path), &sidecar)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DetDataset {
        DetDataset::new(
            vec![
                Category {
                    id: 0,
                    name: "disk".into(),
                },
                Category {
                    id: 1,
                    name: "square".into(),
                },
            ],
            vec![ImageInfo {
                id: 1,
                width: 64,
                height: 64,
                file_name: "a.png".into(),
            }],
            vec![Annotation {
                id: 5,
                image_id: 1,
                bbox: BoundingBox::from_corner(2.0, 2.0, 4.0, 4.0),
                class_id: 1,
                provenance: Provenance::ClassShifted,
            }],
        )
        .unwrap()
    }

    #[test]
    fn corner_to_center() {
        let b = BoundingBox::from_corner(2.0, 2.0, 4.0, 4.0);
        assert_eq!(b, BoundingBox::new(4.0, 4.0, 4.0, 4.0));
        assert_eq!(b.to_corner(), [2.0, 2.0, 4.0, 4.0]);
    }

    #[test]
    fn iou_basics() {
        let a = BoundingBox::from_xyxy(0.0, 0.0, 2.0, 2.0);
        let b = BoundingBox::from_xyxy(1.0, 0.0, 3.0, 2.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        let far = BoundingBox::from_xyxy(10.0, 10.0, 11.0, 11.0);
        assert_eq!(a.iou(&far), 0.0);
    }

    #[test]
    fn clamp_keeps_minimum_side() {
        let b = BoundingBox::from_xyxy(-5.0, 3.0, 0.2, 4.0);
        let (c, changed) = b.clamp_to_image(10.0, 10.0);
        assert!(changed);
        assert!((c.w - 1.0).abs() < 1e-12);
        let [x1, _, x2, _] = c.to_xyxy();
        assert!(x1 >= 0.0 && x2 <= 10.0);
        let inside = BoundingBox::new(5.0, 5.0, 2.0, 2.0);
        assert_eq!(inside.clamp_to_image(10.0, 10.0), (inside, false));
    }

    #[test]
    fn dangling_image_is_rejected() {
        let ds = tiny();
        let mut anns = ds.annotations().to_vec();
        anns[0].image_id = 99;
        let err = ds.with_annotations(anns).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
    }

    #[test]
    fn duplicate_annotation_ids_are_rejected() {
        let ds = tiny();
        let mut anns = ds.annotations().to_vec();
        anns.push(anns[0].clone());
        assert!(matches!(ds.with_annotations(anns), Err(Error::Integrity(_))));
    }

    #[test]
    fn sidecar_path_appends_suffix() {
        assert_eq!(
            provenance_path(Path::new("/tmp/noisy.json")),
            PathBuf::from("/tmp/noisy.json.provenance.json")
        );
    }
}
