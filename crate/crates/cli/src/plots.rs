//! Hand-written SVG plots rendered from report CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 50.0;

/// Axis ranges mapped onto the plot area.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn path(&self, points: &[(f64, f64)]) -> String {
        let mut d = String::new();
        for (i, &(x, y)) in points.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{:.2},{:.2} ", self.px(x), self.py(y));
        }
        d.trim_end().to_string()
    }
}

fn svg(frame: &Frame, title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (x0, x1) = (frame.px(frame.x.0), frame.px(frame.x.1));
    let (y0, y1) = (frame.py(frame.y.0), frame.py(frame.y.1));
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x.0 + t * (frame.x.1 - frame.x.0);
        let yv = frame.y.0 + t * (frame.y.1 - frame.y.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            frame.px(xv),
            y0 + 14.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            frame.py(yv) + 3.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" font-size="13" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="11" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    format!("{}", if r == 0.0 { 0.0 } else { r })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Reads named columns of a CSV; empty cells become `None`.
fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<Option<f64>>>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == *n)
                .with_context(|| format!("{}: missing column `{n}`", path.display()))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = idx
            .iter()
            .map(|&i| {
                let cell = rec.get(i).unwrap_or("");
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>().map(Some).with_context(|| {
                        format!("{} row {}: bad number `{cell}`", path.display(), line + 2)
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn curve_svg(path: &Path, name: &str) -> Result<String> {
    let points: Vec<(f64, f64)> = read_columns(path, &["coverage", "risk"])?
        .into_iter()
        .filter_map(|r| Some((r[0]?, r[1]?)))
        .collect();
    let frame = Frame {
        x: (0.0, 1.0),
        y: (0.0, 1.0),
    };
    let body = format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n",
        frame.path(&points)
    );
    Ok(svg(
        &frame,
        &format!("Risk-coverage: {name}"),
        "coverage",
        "risk",
        &body,
    ))
}

fn reliability_svg(path: &Path, name: &str) -> Result<String> {
    let points: Vec<(f64, f64)> = read_columns(path, &["mean_conf", "accuracy"])?
        .into_iter()
        .filter_map(|r| Some((r[0]?, r[1]?)))
        .collect();
    let frame = Frame {
        x: (0.0, 1.0),
        y: (0.0, 1.0),
    };
    let mut body = format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n",
        frame.path(&[(0.0, 0.0), (1.0, 1.0)])
    );
    if !points.is_empty() {
        let _ = writeln!(
            body,
            "<path d=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\"/>",
            frame.path(&points)
        );
    }
    for &(x, y) in &points {
        let _ = writeln!(
            body,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#d62728\"/>",
            frame.px(x),
            frame.py(y)
        );
    }
    Ok(svg(
        &frame,
        &format!("Reliability: {name}"),
        "mean confidence",
        "accuracy",
        &body,
    ))
}

fn alpha_svg(path: &Path) -> Result<String> {
    let points: Vec<(f64, f64)> = read_columns(path, &["alpha", "difference_mean"])?
        .into_iter()
        .filter_map(|r| Some((r[0]?, r[1]?)))
        .collect();
    let span = points
        .iter()
        .map(|p| p.1.abs())
        .fold(0.0f64, f64::max)
        .max(0.01)
        * 1.2;
    let frame = Frame {
        x: (0.0, 1.0),
        y: (-span, span),
    };
    let mut body = format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n",
        frame.path(&[(0.0, 0.0), (1.0, 0.0)])
    );
    let _ = writeln!(
        body,
        "<path d=\"{}\" fill=\"none\" stroke=\"#2ca02c\" stroke-width=\"1.5\"/>",
        frame.path(&points)
    );
    for &(x, y) in &points {
        let _ = writeln!(
            body,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#2ca02c\"/>",
            frame.px(x),
            frame.py(y)
        );
    }
    Ok(svg(
        &frame,
        "Calibrator minus MaxProb AUC",
        "alpha (source fraction)",
        "AUC difference",
        &body,
    ))
}

/// Writes one SVG next to every curve, reliability and alpha-sweep CSV in `dir`.
pub fn render_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut written = Vec::new();
    for path in entries {
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        let Some(stem) = file.strip_suffix(".csv") else {
            continue;
        };
        let svg = if let Some(name) = stem.strip_prefix("curve_") {
            curve_svg(&path, name)?
        } else if let Some(name) = stem.strip_prefix("reliability_") {
            reliability_svg(&path, name)?
        } else if stem == "fig5" {
            alpha_svg(&path)?
        } else {
            continue;
        };
        let out = dir.join(format!("{stem}.svg"));
        fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
        written.push(out);
    }
    if written.is_empty() {
        bail!(
            "no curve_*.csv, reliability_*.csv or fig5.csv in {}",
            dir.display()
        );
    }
    Ok(written)
}
