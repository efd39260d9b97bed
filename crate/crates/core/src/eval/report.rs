//! SVG figures: noise-impact curves, sample-weight overlays and box-target
//! IoU curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::experiment::{SweepRow, TargetCurve, WeightDump, ARTIFACTS_DIR};
use crate::error::{Error, Result};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A line chart with markers, rendered to standalone SVG.
#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.1 } else { 0.5 };
        (lo - pad, hi + pad)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

impl LineChart {
    pub fn to_svg(&self) -> String {
        let (w, h) = (640.0, 420.0);
        let (ml, mr, mt, mb) = (64.0, 150.0, 40.0, 52.0);
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let (x0, x1) = nice_range(x0, x1);
        let (y0, y1) = nice_range(y0, y1);
        let pw = w - ml - mr;
        let ph = h - mt - mb;
        let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            ml + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(
                svg,
                r##"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="#ddd"/><text x="{0}" y="{3}" text-anchor="middle">{4:.2}</text>"##,
                sx(fx),
                mt,
                mt + ph,
                mt + ph + 16.0,
                fx
            );
            let _ = writeln!(
                svg,
                r##"<line x1="{0}" y1="{2}" x2="{1}" y2="{2}" stroke="#ddd"/><text x="{3}" y="{4}" text-anchor="end">{5:.3}</text>"##,
                ml,
                ml + pw,
                sy(fy),
                ml - 6.0,
                sy(fy) + 4.0,
                fy
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            ml + pw / 2.0,
            h - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            mt + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            if s.points.len() > 1 {
                let path: Vec<String> = s
                    .points
                    .iter()
                    .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                    .collect();
                let _ = writeln!(
                    svg,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    path.join(" ")
                );
            }
            for &(x, y) in &s.points {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                    sx(x),
                    sy(y)
                );
            }
            let ly = mt + 14.0 + 18.0 * i as f64;
            let _ = writeln!(
                svg,
                r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/><text x="{3}" y="{4}">{5}</text>"#,
                ml + pw + 10.0,
                ly,
                ml + pw + 30.0,
                ml + pw + 36.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Mean mAP over seeds per (method, kind, level), successful rows only.
/// Clean rows are added as the level-0 point of every kind of the method.
pub fn noise_impact_series(rows: &[SweepRow]) -> BTreeMap<String, Vec<Series>> {
    let mut acc: BTreeMap<(String, String), BTreeMap<i64, (f64, usize)>> = BTreeMap::new();
    let mut clean: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.ok) {
        let Some(map) = r.map else { continue };
        if r.kind == "clean" {
            let e = clean.entry(r.method.clone()).or_default();
            e.0 += map;
            e.1 += 1;
        } else {
            let key = (r.method.clone(), r.kind.clone());
            let e = acc
                .entry(key)
                .or_default()
                .entry((r.level * 1000.0).round() as i64)
                .or_default();
            e.0 += map;
            e.1 += 1;
        }
    }
    let mut out: BTreeMap<String, Vec<Series>> = BTreeMap::new();
    for ((method, kind), levels) in acc {
        let mut points: Vec<(f64, f64)> = levels
            .into_iter()
            .map(|(l, (s, n))| (l as f64 / 1000.0, s / n as f64))
            .collect();
        if let Some((s, n)) = clean.get(&method) {
            points.insert(0, (0.0, s / *n as f64));
        }
        out.entry(method).or_default().push(Series { name: kind, points });
    }
    for (method, (s, n)) in clean {
        out.entry(method).or_insert_with(|| {
            vec![Series {
                name: "clean".into(),
                points: vec![(0.0, s / n as f64)],
            }]
        });
    }
    out
}

/// The training image with colored dots at every dumped location: red for
/// weight 0 through green for weight 1; positives drawn larger. Boxes are
/// the (possibly noisy) training annotations.
pub fn weight_overlay_svg(dump: &WeightDump) -> String {
    let scale = 6.0;
    let (w, h) = (dump.width as f64 * scale, dump.height as f64 * scale);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" shape-rendering="crispEdges">"#
    );
    for y in 0..dump.height {
        for x in 0..dump.width {
            let v = dump.pixels[(y * dump.width + x) as usize];
            let _ = write!(
                svg,
                r#"<rect x="{}" y="{}" width="{scale}" height="{scale}" fill="rgb({v},{v},{v})"/>"#,
                x as f64 * scale,
                y as f64 * scale
            );
        }
        svg.push('\n');
    }
    for g in &dump.gts {
        let [x1, y1, _, _] = g.to_xyxy();
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#00bfff" stroke-width="1.5"/>"##,
            x1 * scale,
            y1 * scale,
            g.w * scale,
            g.h * scale
        );
    }
    for s in &dump.samples {
        let stride = dump.strides.get(s.key.level as usize).copied().unwrap_or(1) as f64;
        let cx = (s.key.grid_x as f64 + 0.5) * stride * scale;
        let cy = (s.key.grid_y as f64 + 0.5) * stride * scale;
        let wgt = s.weight.clamp(0.0, 1.0);
        let (r, g) = ((255.0 * (1.0 - wgt)).round(), (255.0 * wgt).round());
        let radius = if s.assigned_gt.is_some() { 5.0 } else { 3.0 };
        let _ = writeln!(
            svg,
            r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="{radius}" fill="rgb({r},{g},0)" fill-opacity="0.85"><title>{:.3}</title></circle>"#,
            s.weight
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes every figure the results support into `out_dir` and returns the
/// written paths. Cells without dumps in `results_dir/artifacts` are
/// skipped with a warning.
pub fn plot_report(rows: &[SweepRow], results_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Empty("results table has no rows".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (method, series) in noise_impact_series(rows) {
        let chart = LineChart {
            title: format!("Noise impact ({method})"),
            x_label: "noise level".into(),
            y_label: "mAP (clean val)".into(),
            series,
        };
        let path = out_dir.join(format!("noise_impact_{}.svg", method.replace('+', "_")));
        write_file(&path, &chart.to_svg())?;
        written.push(path);
    }

    let artifacts = results_dir.join(ARTIFACTS_DIR);
    let mut curves = Vec::new();
    for r in rows.iter().filter(|r| r.ok) {
        let dir = artifacts.join(&r.cell_id);
        let weights = dir.join("weights.json");
        if weights.exists() {
            let dumps: Vec<WeightDump> = read_json(&weights)?;
            for d in dumps {
                let path = out_dir.join(format!("weights_{}_img{}.svg", r.cell_id, d.image_id));
                write_file(&path, &weight_overlay_svg(&d))?;
                written.push(path);
            }
        } else {
            warn!("no weight dump for {}; skipping overlay", r.cell_id);
        }
        let rbr = dir.join("rbr_iou.json");
        if rbr.exists() {
            let mut c: TargetCurve = read_json(&rbr)?;
            c.label = r.cell_id.clone();
            curves.push(c);
        }
    }
    if !curves.is_empty() {
        let path = out_dir.join("rbr_target_iou.svg");
        write_file(&path, &target_iou_chart(&curves).to_svg())?;
        written.push(path);
    }
    Ok(written)
}

pub fn target_iou_chart(curves: &[TargetCurve]) -> LineChart {
    LineChart {
        title: "Regression target vs clean box".into(),
        x_label: "epoch".into(),
        y_label: "mean IoU(target, clean)".into(),
        series: curves
            .iter()
            .map(|c| Series {
                name: c.label.clone(),
                points: c.points.iter().map(|&(e, v)| (e as f64, v)).collect(),
            })
            .collect(),
    }
}
