//! Self-contained SVG plots of exported explanations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::explain::{ShapeExport, SurfaceExport};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        let pad = (y1 - y0) * 0.05;
        Frame {
            x0,
            x1,
            y0: y0 - pad,
            y1: y1 + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        out,
        "<rect x=\"{l}\" y=\"{t}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#333\"/>",
        r - l,
        b - t
    );
    for k in 0..=4 {
        let x = f.x0 + (f.x1 - f.x0) * k as f64 / 4.0;
        let y = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            f.px(x),
            b + 14.0,
            tick(x)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            l - 4.0,
            f.py(y) + 3.0,
            tick(y)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        (l + r) / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">{}</text>",
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn polyline(out: &mut String, f: &Frame, xs: &[f64], ys: &[f64], color: &str) {
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect();
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
        pts.join(" ")
    );
}

/// Density as background bars scaled to the plot height.
fn density_bars(out: &mut String, f: &Frame, export: &ShapeExport) {
    let peak = export.density.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 || export.grid_raw.len() < 2 {
        return;
    }
    let g = &export.grid_raw;
    for p in 0..g.len() {
        let left = if p == 0 { g[0] } else { (g[p - 1] + g[p]) / 2.0 };
        let right = if p + 1 == g.len() { g[p] } else { (g[p] + g[p + 1]) / 2.0 };
        let h = export.density[p] / peak * (HEIGHT - TOP - BOTTOM);
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#ccc\" fill-opacity=\"0.5\"/>",
            f.px(left),
            HEIGHT - BOTTOM - h,
            (f.px(right) - f.px(left)).max(0.5),
            h
        );
    }
}

fn legend(out: &mut String, labels: &[String]) {
    for (k, label) in labels.iter().enumerate() {
        let y = TOP + 14.0 + 14.0 * k as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            WIDTH - RIGHT - 110.0,
            WIDTH - RIGHT - 92.0,
            PALETTE[k % PALETTE.len()],
            WIDTH - RIGHT - 88.0,
            y + 3.0,
            escape(label)
        );
    }
}

/// Shape curves sharing one axis (one per task), over the first export's
/// density.
pub fn shape_plot(exports: &[&ShapeExport]) -> String {
    let first = exports[0];
    let f = Frame::new(
        first.grid_raw.iter().copied(),
        exports.iter().flat_map(|e| e.contribution_mean.iter().copied()),
    );
    let mut out = String::new();
    header(&mut out, &first.feature);
    density_bars(&mut out, &f, first);
    for (k, e) in exports.iter().enumerate() {
        polyline(&mut out, &f, &e.grid_raw, &e.contribution_mean, PALETTE[k % PALETTE.len()]);
    }
    if exports.len() > 1 {
        let labels: Vec<String> = exports
            .iter()
            .map(|e| e.task_label.clone().unwrap_or_else(|| e.task.to_string()))
            .collect();
        legend(&mut out, &labels);
    }
    axes(&mut out, &f, &first.feature, "contribution");
    out.push_str("</svg>\n");
    out
}

/// One curve per layer of a single export.
pub fn layer_plot(export: &ShapeExport) -> String {
    let f = Frame::new(export.grid_raw.iter().copied(), export.layers.iter().flatten().copied());
    let mut out = String::new();
    header(&mut out, &format!("{} by layer", export.feature));
    for (m, l) in export.layers.iter().enumerate() {
        polyline(&mut out, &f, &export.grid_raw, l, PALETTE[m % PALETTE.len()]);
    }
    let labels: Vec<String> = (1..=export.layers.len()).map(|m| format!("layer {m}")).collect();
    legend(&mut out, &labels);
    axes(&mut out, &f, &export.feature, "contribution");
    out.push_str("</svg>\n");
    out
}

fn diverging(t: f64) -> String {
    // t in [-1, 1]: blue through white to red
    let t = t.clamp(-1.0, 1.0);
    let (r, g, b) = if t < 0.0 {
        let s = 1.0 + t;
        (s, s, 1.0)
    } else {
        (1.0, 1.0 - t, 1.0 - t)
    };
    format!(
        "#{:02x}{:02x}{:02x}",
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8
    )
}

/// Scatter of the pair's raw values colored by centered contribution.
pub fn surface_plot(export: &SurfaceExport) -> String {
    let f = Frame::new(
        export.points.iter().map(|p| p.feature_a_raw),
        export.points.iter().map(|p| p.feature_b_raw),
    );
    let scale = export
        .points
        .iter()
        .map(|p| p.contribution_centered.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut out = String::new();
    header(&mut out, &format!("{} x {}", export.features[0], export.features[1]));
    for p in &export.points {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.6\" fill=\"{}\"/>",
            f.px(p.feature_a_raw),
            f.py(p.feature_b_raw),
            diverging(p.contribution_centered / scale)
        );
    }
    axes(&mut out, &f, &export.features[0], &export.features[1]);
    out.push_str("</svg>\n");
    out
}

fn plot_name(feature: &str) -> String {
    feature
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes one `<feature>.svg` per feature (tasks drawn together) and, with
/// `layers`, one `<feature>[_<group>]_layers.svg` per export.
pub fn render_plots(exports: &[ShapeExport], dir: &Path, layers: bool) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if exports.is_empty() {
        return Ok(written);
    }
    fs::create_dir_all(dir)?;
    let mut by_feature: BTreeMap<&str, Vec<&ShapeExport>> = BTreeMap::new();
    for e in exports {
        by_feature.entry(e.feature.as_str()).or_default().push(e);
    }
    for (feature, group) in &by_feature {
        let path = dir.join(format!("{}.svg", plot_name(feature)));
        fs::write(&path, shape_plot(group))?;
        written.push(path);
        if layers {
            for e in group {
                let suffix = e.task_label.as_deref().map(|l| format!("_{}", plot_name(l))).unwrap_or_default();
                let path = dir.join(format!("{}{}_layers.svg", plot_name(feature), suffix));
                fs::write(&path, layer_plot(e))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

pub fn render_surface(export: &SurfaceExport, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!(
        "{}_{}.svg",
        plot_name(&export.features[0]),
        plot_name(&export.features[1])
    ));
    fs::write(&path, surface_plot(export))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::SurfacePoint;

    fn export(feature: &str, task: usize) -> ShapeExport {
        let grid: Vec<f64> = (0..5).map(|i| i as f64).collect();
        ShapeExport {
            feature: feature.into(),
            task,
            task_label: None,
            grid_norm: grid.iter().map(|g| g / 4.0).collect(),
            members: vec![grid.iter().map(|g| g * 0.5 - 1.0).collect()],
            contribution_mean: grid.iter().map(|g| g * 0.5 - 1.0).collect(),
            contribution_std: vec![0.0; 5],
            layers: vec![grid.iter().map(|g| g * 0.4 - 0.8).collect(), grid.iter().map(|g| g * 0.1 - 0.2).collect()],
            density: vec![0.1, 0.3, 0.2, 0.2, 0.2],
            centering: 0.0,
            layer_centering: vec![0.0, 0.0],
            grid_raw: grid,
            grid_labels: None,
        }
    }

    #[test]
    fn one_file_per_feature() {
        let dir = tempfile::tempdir().unwrap();
        let exports: Vec<ShapeExport> = (0..8).map(|i| export(&format!("f{i}"), 0)).collect();
        assert_eq!(render_plots(&exports, dir.path(), false).unwrap().len(), 8);
        assert_eq!(render_plots(&exports, dir.path(), true).unwrap().len(), 16);
        let empty = dir.path().join("none");
        assert!(render_plots(&[], &empty, true).unwrap().is_empty());
        assert!(!empty.exists());
    }

    #[test]
    fn rendering_is_deterministic() {
        let e = export("a<b", 0);
        assert_eq!(shape_plot(&[&e]), shape_plot(&[&e]));
        assert!(shape_plot(&[&e]).contains("a&lt;b"));
        let s = SurfaceExport {
            features: ["x".into(), "y".into()],
            points: vec![
                SurfacePoint {
                    feature_a_raw: 0.0,
                    feature_b_raw: 1.0,
                    contribution: 1.0,
                    contribution_centered: 0.5,
                },
                SurfacePoint {
                    feature_a_raw: 1.0,
                    feature_b_raw: 0.0,
                    contribution: 0.0,
                    contribution_centered: -0.5,
                },
            ],
        };
        let a = surface_plot(&s);
        assert_eq!(a, surface_plot(&s));
        assert!(a.contains("#ff0000") && a.contains("#0000ff"));
    }
}
