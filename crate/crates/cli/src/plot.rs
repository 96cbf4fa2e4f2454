//! Static charts and CSV tables from artifact files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;

use crate::artifact::read_records;

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

fn lookup<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(v, |v, k| match v {
        Value::Array(a) => k.parse::<usize>().ok().and_then(|i| a.get(i)),
        _ => v.get(k),
    })
}

fn number(v: &Value, key: &str) -> Option<f64> {
    lookup(v, key).and_then(Value::as_f64)
}

/// Points from a JSONL artifact (`key` is a dotted path into the record
/// payload) or from a CSV file written by [`write_csv`].
pub fn load_points(path: &Path, xkey: &str, ykey: &str) -> Result<Vec<Point>> {
    let series = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    if path.extension().is_some_and(|e| e == "csv") {
        return read_csv(path);
    }
    let mut out = Vec::new();
    for (i, rec) in read_records(path)?.iter().enumerate() {
        let (Some(x), Some(y)) = (number(&rec.data, xkey), number(&rec.data, ykey)) else {
            bail!(
                "{}: parse error in record {}: missing numeric `{xkey}` or `{ykey}`",
                path.display(),
                i + 1
            );
        };
        out.push(Point {
            series: series.clone(),
            x,
            y,
        });
    }
    Ok(out)
}

pub fn write_csv(path: &Path, points: &[Point]) -> Result<()> {
    let mut s = String::from("series,x,y\n");
    for p in points {
        writeln!(s, "{},{},{}", p.series, p.x, p.y)?;
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_csv(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("series,x,y") {
        bail!("{}: parse error: expected header `series,x,y`", path.display());
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.rsplitn(3, ',').collect();
            let parsed = (f.len() == 3)
                .then(|| Some((f[2], f[1].parse::<f64>().ok()?, f[0].parse::<f64>().ok()?)))
                .flatten();
            let (series, x, y) =
                parsed.with_context(|| format!("{}: parse error on line {}", path.display(), i + 2))?;
            Ok(Point {
                series: series.into(),
                x,
                y,
            })
        })
        .collect()
}

/// Sort points by series then x so the output does not depend on file
/// order within a series.
pub fn sort_points(points: &mut [Point]) {
    points.sort_by(|a, b| a.series.cmp(&b.series).then(a.x.total_cmp(&b.x)).then(a.y.total_cmp(&b.y)));
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A line chart with one polyline per series.
pub fn write_svg(path: &Path, points: &[Point], xlabel: &str, ylabel: &str) -> Result<()> {
    if points.is_empty() {
        bail!("nothing to plot: the series are empty");
    }
    let (w, h, m) = (640.0, 420.0, 60.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    )?;
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#)?;
    writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    )?;
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            sx(fx),
            h - m + 18.0,
            tick(fx)
        )?;
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            m - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        )?;
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 14.0,
        escape(xlabel)
    )?;
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(ylabel)
    )?;
    let mut names: Vec<&str> = points.iter().map(|p| p.series.as_str()).collect();
    names.dedup();
    for (k, name) in names.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = points
            .iter()
            .filter(|p| p.series == *name)
            .map(|p| format!("{:.1},{:.1}", sx(p.x), sy(p.y)))
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        )?;
        for p in &pts {
            let (cx, cy) = p.split_once(',').unwrap();
            writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#)?;
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - m - 120.0,
            m + 16.0 * k as f64,
            escape(name)
        )?;
    }
    s.push_str("</svg>\n");
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
