//! Gap-versus-size curves as CSV plus a static SVG line chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use super::EvalReport;
use crate::error::{Error, Result};
use crate::search::DecodeMode;

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub model: String,
    pub paradigm: String,
    pub decode: DecodeMode,
    /// `(size, mean gap %)`, in the order evaluated.
    pub points: Vec<(usize, f64)>,
}

pub fn curves_from_reports(reports: &[EvalReport]) -> Vec<Curve> {
    reports
        .iter()
        .map(|r| Curve {
            model: r.info.model.clone(),
            paradigm: r.info.paradigm.clone(),
            decode: r.decode,
            points: r.rows.iter().map(|row| (row.size, row.mean_gap_pct)).collect(),
        })
        .collect()
}

fn slug(d: DecodeMode) -> String {
    d.to_string().replace(':', "-")
}

const CURVE_HEADER: [&str; 4] = ["size", "gap", "model", "paradigm"];

/// Writes `curves_<decode>.csv` and `curves_<decode>.svg` per decode mode
/// and returns the paths written, CSV before SVG.
pub fn emit_plot_data(curves: &[Curve], dir: &Path) -> Result<Vec<PathBuf>> {
    if curves.is_empty() || curves.iter().any(|c| c.points.is_empty()) {
        return Err(Error::Config("nothing to plot".into()));
    }
    fs::create_dir_all(dir)?;
    let mut by_decode: BTreeMap<String, Vec<&Curve>> = BTreeMap::new();
    for c in curves {
        by_decode.entry(slug(c.decode)).or_default().push(c);
    }
    let mut paths = Vec::new();
    for (name, group) in by_decode {
        let csv_path = dir.join(format!("curves_{name}.csv"));
        let mut out = csv::Writer::from_path(&csv_path)?;
        out.write_record(CURVE_HEADER)?;
        for c in &group {
            for (size, gap) in &c.points {
                out.write_record([size.to_string(), gap.to_string(), c.model.clone(), c.paradigm.clone()])?;
            }
        }
        out.flush()?;
        let svg_path = dir.join(format!("curves_{name}.svg"));
        fs::write(&svg_path, svg(&group, &name))?;
        paths.push(csv_path);
        paths.push(svg_path);
    }
    Ok(paths)
}

/// Reads a curve CSV back; consecutive rows of one model form one curve.
pub fn read_curve_csv(r: impl Read, decode: DecodeMode) -> Result<Vec<Curve>> {
    let mut input = csv::Reader::from_reader(r);
    if input.headers()?.iter().ne(CURVE_HEADER) {
        return Err(Error::Config("unexpected curve header".into()));
    }
    let mut curves: Vec<Curve> = Vec::new();
    for rec in input.records() {
        let rec = rec?;
        let bad = |c: &str| Error::Config(format!("bad {c} `{}`", &rec[0]));
        let size: usize = rec[0].parse().map_err(|_| bad("size"))?;
        let gap: f64 = rec[1].parse().map_err(|_| bad("gap"))?;
        match curves.last_mut() {
            Some(c) if c.model == rec[2] && c.paradigm == rec[3] => c.points.push((size, gap)),
            _ => curves.push(Curve {
                model: rec[2].to_string(),
                paradigm: rec[3].to_string(),
                decode,
                points: vec![(size, gap)],
            }),
        }
    }
    Ok(curves)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 480.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 350.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

fn svg(curves: &[&Curve], title: &str) -> String {
    let xs = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0 as f64));
    let ys = curves.iter().flat_map(|c| c.points.iter().map(|p| p.1));
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y_min, y_max) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="18">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<g id="axes" data-x-min="{x_min}" data-x-max="{x_max}" data-y-min="{y_min}" data-y-max="{y_max}" stroke="black">"#
    );
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{BOTTOM}" x2="{RIGHT}" y2="{BOTTOM}"/>"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{BOTTOM}"/>"#);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}" text-anchor="middle">{x_min}</text>"#, BOTTOM + 16.0);
    let _ = writeln!(s, r#"<text x="{RIGHT}" y="{}" text-anchor="middle">{x_max}</text>"#, BOTTOM + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">graph size</text>"#, (LEFT + RIGHT) / 2.0, BOTTOM + 34.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y_min:.3}</text>"#, LEFT - 4.0, BOTTOM);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y_max:.3}</text>"#, LEFT - 4.0, TOP + 4.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {0})" text-anchor="middle">optimality gap (%)</text>"#, (TOP + BOTTOM) / 2.0);
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = c
            .points
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    scale(x as f64, x_min, x_max, LEFT, RIGHT),
                    scale(y, y_min, y_max, BOTTOM, TOP)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" data-model="{}" data-paradigm="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(&c.model),
            escape(&c.paradigm),
            points.join(" ")
        );
        for p in &points {
            let (x, y) = p.split_once(',').expect("formatted as x,y");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{} ({})</text>"#,
            RIGHT + 15.0,
            RIGHT + 35.0,
            RIGHT + 40.0,
            ly + 4.0,
            escape(&c.model),
            escape(&c.paradigm)
        );
    }
    s.push_str("</svg>\n");
    s
}
