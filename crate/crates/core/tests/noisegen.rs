mod common;

use std::collections::BTreeSet;

use common::{ks_uniform, random_dataset};
use robust_tod::annotations::{save_dataset, BoundingBox, DetDataset, Provenance};
use robust_tod::noisegen::{
    inject_missing, noise_report, noisy_count, synthesize, NoiseKind, NoiseSpec, PerturbationDraw,
};

const LEVELS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

fn spec(kind: NoiseKind, level: f64, seed: u64) -> NoiseSpec {
    NoiseSpec::new(kind, level, seed).unwrap()
}

#[test]
fn sampled_kinds_touch_exactly_round_a_n() {
    // 10001 annotations so that a * N is never an integer for a = 0.1.
    let ds = random_dataset(1, 10_001, 6, 4096, 1);
    let n = ds.annotations().len();
    for level in LEVELS {
        let want = (level * n as f64).round_ties_even() as usize;
        let missing = synthesize(&ds, &spec(NoiseKind::Missing, level, 3)).unwrap();
        assert_eq!(missing.dataset.annotations().len(), n - want);
        assert_eq!(missing.audit.len(), want);

        let shifted = synthesize(&ds, &spec(NoiseKind::ClassShift, level, 3)).unwrap();
        let r = noise_report(&ds, &shifted.dataset).unwrap();
        assert_eq!(r.class_shifted, want);
        let marked = shifted
            .dataset
            .annotations()
            .iter()
            .filter(|a| a.provenance == Provenance::ClassShifted)
            .count();
        assert_eq!(marked, want);

        let extra = synthesize(&ds, &spec(NoiseKind::Extra, level, 3)).unwrap();
        assert_eq!(extra.dataset.annotations().len(), n + want);
    }
}

#[test]
fn round_half_to_even_on_ten_annotations() {
    let ds = random_dataset(2, 5, 3, 128, 2);
    let first = inject_missing(&ds, &spec(NoiseKind::Missing, 0.25, 9)).unwrap();
    assert_eq!(first.audit.len(), 2);
    for _ in 0..3 {
        let again = inject_missing(&ds, &spec(NoiseKind::Missing, 0.25, 9)).unwrap();
        assert_eq!(again.audit, first.audit);
    }
    assert_eq!(noisy_count(0.25, 10), 2);
    assert_eq!(noisy_count(0.35, 10), 4);
}

#[test]
fn zero_level_is_identity() {
    let ds = random_dataset(4, 10, 3, 128, 3);
    for kind in [
        NoiseKind::Missing,
        NoiseKind::Extra,
        NoiseKind::ClassShift,
        NoiseKind::Box,
    ] {
        let out = synthesize(&ds, &spec(kind, 0.0, 1)).unwrap();
        let same: Vec<_> = out
            .dataset
            .annotations()
            .iter()
            .map(|a| (a.id, a.class_id, a.bbox))
            .collect();
        let orig: Vec<_> = ds.annotations().iter().map(|a| (a.id, a.class_id, a.bbox)).collect();
        assert_eq!(same, orig, "{kind}");
        assert!(out.audit.is_empty(), "{kind}");
    }
}

#[test]
fn class_shift_never_keeps_the_class() {
    let ds = random_dataset(20, 50, 8, 256, 4);
    let out = synthesize(&ds, &spec(NoiseKind::ClassShift, 0.4, 5)).unwrap();
    let before: std::collections::HashMap<u64, usize> = ds.annotations().iter().map(|a| (a.id, a.class_id)).collect();
    for a in out.dataset.annotations() {
        let shifted = a.provenance == Provenance::ClassShifted;
        assert_eq!(shifted, before[&a.id] != a.class_id);
        assert!(a.class_id < 8);
    }
}

#[test]
fn extra_boxes_are_tiny_and_inside_their_image() {
    let ds = random_dataset(50, 20, 4, 128, 6);
    let out = synthesize(&ds, &spec(NoiseKind::Extra, 0.4, 7)).unwrap();
    let extra: Vec<_> = out
        .dataset
        .annotations()
        .iter()
        .filter(|a| a.provenance == Provenance::Extra)
        .collect();
    assert_eq!(extra.len(), 400);
    for a in extra {
        let [x1, y1, x2, y2] = a.bbox.to_xyxy();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 128.0 && y2 <= 128.0, "{:?}", a.bbox);
        assert!((2.0..=16.0).contains(&a.bbox.w) && (2.0..=16.0).contains(&a.bbox.h));
    }
}

#[test]
fn eq1_hand_example() {
    let b = BoundingBox::new(10.0, 10.0, 8.0, 4.0);
    let d = PerturbationDraw {
        dx: 0.1,
        dy: -0.2,
        dw: 0.3,
        dh: 0.0,
    };
    let p = d.apply(&b);
    for (got, want) in p.to_array().iter().zip([10.8, 9.2, 10.4, 4.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

fn box_offsets(clean: &DetDataset, noisy: &DetDataset) -> [Vec<f64>; 4] {
    let mut out: [Vec<f64>; 4] = Default::default();
    for (a, b) in clean.annotations().iter().zip(noisy.annotations()) {
        assert_eq!(a.id, b.id);
        out[0].push((b.bbox.cx - a.bbox.cx) / a.bbox.w);
        out[1].push((b.bbox.cy - a.bbox.cy) / a.bbox.h);
        out[2].push(b.bbox.w / a.bbox.w - 1.0);
        out[3].push(b.bbox.h / a.bbox.h - 1.0);
    }
    out
}

#[test]
fn box_offsets_are_uniform_on_open_interval() {
    let a = 0.4;
    let ds = random_dataset(100, 1000, 4, 4096, 8);
    let out = synthesize(&ds, &spec(NoiseKind::Box, a, 11)).unwrap();
    assert_eq!(out.audit.len(), ds.annotations().len());
    for (name, mut xs) in ["dx", "dy", "dw", "dh"].into_iter().zip(box_offsets(&ds, &out.dataset)) {
        assert!(xs.iter().all(|x| x.abs() < a + 1e-9), "{name} out of range");
        let d = ks_uniform(&mut xs, -a, a);
        assert!(d < 0.01, "{name}: KS {d}");
    }
}

#[test]
fn report_bounds_box_offsets() {
    let ds = random_dataset(20, 50, 3, 512, 12);
    let out = synthesize(&ds, &spec(NoiseKind::Box, 0.2, 1)).unwrap();
    let r = noise_report(&ds, &out.dataset).unwrap();
    assert!(r.max_abs_offset.iter().all(|&m| m < 0.2));
    assert_eq!(r.box_perturbed, ds.annotations().len());
}

#[test]
fn mixed_noise_counts_and_order() {
    let ds = random_dataset(10, 10, 4, 256, 13);
    let mixed = NoiseSpec::mixed(vec![(NoiseKind::Box, 0.2), (NoiseKind::ClassShift, 0.2)], 5).unwrap();
    let out = synthesize(&ds, &mixed).unwrap();
    let anns = out.dataset.annotations();
    let both = anns
        .iter()
        .filter(|a| a.provenance == Provenance::BothShiftedAndPerturbed)
        .count();
    let only_box = anns.iter().filter(|a| a.provenance == Provenance::BoxPerturbed).count();
    assert_eq!(both, 20);
    assert_eq!(only_box, 80);

    // Class shift never touches coordinates, so either order gives the same boxes.
    let boxed_first = synthesize(&ds, &spec(NoiseKind::Box, 0.2, 5)).unwrap().dataset;
    let then_shift = synthesize(&boxed_first, &spec(NoiseKind::ClassShift, 0.2, 5))
        .unwrap()
        .dataset;
    let coords = |d: &DetDataset| d.annotations().iter().map(|a| a.bbox).collect::<Vec<_>>();
    assert_eq!(coords(&then_shift), coords(&out.dataset));
}

#[test]
fn mixed_rejects_empty_and_duplicates() {
    assert!(NoiseSpec::mixed(vec![], 0).is_err());
    assert!(NoiseSpec::mixed(vec![(NoiseKind::Box, 0.1), (NoiseKind::Box, 0.2)], 0).is_err());
}

#[test]
fn output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = random_dataset(30, 12, 5, 256, 14);
    for kind in [
        NoiseKind::Missing,
        NoiseKind::Extra,
        NoiseKind::ClassShift,
        NoiseKind::Box,
    ] {
        let mut files = Vec::new();
        for run in 0..2 {
            let out = synthesize(&ds, &spec(kind, 0.3, 21)).unwrap();
            let path = dir.path().join(format!("{kind}-{run}.json"));
            save_dataset(&out.dataset, &path).unwrap();
            files.push(std::fs::read(&path).unwrap());
        }
        assert_eq!(files[0], files[1], "{kind}");
    }
}

#[test]
fn image_order_does_not_change_what_is_perturbed() {
    let ds = random_dataset(30, 12, 5, 256, 15);
    let mut images = ds.images().to_vec();
    images.reverse();
    let mut anns = ds.annotations().to_vec();
    anns.reverse();
    let permuted = DetDataset::new(ds.categories().to_vec(), images, anns).unwrap();
    for kind in [
        NoiseKind::Missing,
        NoiseKind::Extra,
        NoiseKind::ClassShift,
        NoiseKind::Box,
    ] {
        let a = synthesize(&ds, &spec(kind, 0.3, 4)).unwrap();
        let b = synthesize(&permuted, &spec(kind, 0.3, 4)).unwrap();
        assert_eq!(a.audit, b.audit, "{kind}");
        let by_id = |d: &DetDataset| {
            d.annotations()
                .iter()
                .map(|x| (x.id, x.class_id, x.bbox.to_array().map(f64::to_bits)))
                .collect::<BTreeSet<_>>()
        };
        assert_eq!(by_id(&a.dataset), by_id(&b.dataset), "{kind}");
    }
}
