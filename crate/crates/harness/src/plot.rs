//! SVG figures: per-group PR curves with a fold band, and AP against training size.
//!
//! Output is a pure function of the input rows; all coordinates are printed
//! with fixed precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mil_core::metrics::{precision_at_recalls, PrPoint};

use crate::error::{HarnessError, Result};
use crate::reports::PrRow;
use crate::sweep::SizeSummary;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const GRID_POINTS: usize = 101;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// Interpolated precision envelope of one group of folds on the recall grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub recall: Vec<f64>,
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn pr_band(folds: &[Vec<PrPoint>]) -> Result<Band> {
    if folds.is_empty() {
        return Err(HarnessError::Data("no folds to plot".into()));
    }
    let recall: Vec<f64> = (0..GRID_POINTS).map(|i| i as f64 / (GRID_POINTS - 1) as f64).collect();
    let per_fold: Vec<Vec<f64>> = folds.iter().map(|f| precision_at_recalls(f, &recall)).collect();
    let column = |i: usize| per_fold.iter().map(move |p| p[i]);
    Ok(Band {
        min: (0..GRID_POINTS).map(|i| column(i).fold(f64::INFINITY, f64::min)).collect(),
        max: (0..GRID_POINTS).map(|i| column(i).fold(f64::NEG_INFINITY, f64::max)).collect(),
        mean: (0..GRID_POINTS).map(|i| column(i).sum::<f64>() / folds.len() as f64).collect(),
        recall,
    })
}

/// Groups PR rows by `size` (or a single group for evaluation curves) and fold.
pub fn group_curves(rows: &[PrRow]) -> BTreeMap<Option<usize>, Vec<Vec<PrPoint>>> {
    let mut by_key: BTreeMap<(Option<usize>, usize), Vec<PrPoint>> = BTreeMap::new();
    for r in rows {
        by_key.entry((r.size, r.fold)).or_default().push(r.point());
    }
    let mut groups: BTreeMap<Option<usize>, Vec<Vec<PrPoint>>> = BTreeMap::new();
    for ((size, _), points) in by_key {
        groups.entry(size).or_default().push(points);
    }
    groups
}

struct Frame {
    x_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN + v / self.x_max * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - v * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open_svg(title: &str, x_label: &str, y_label: &str, frame: &Frame, x_ticks: &[f64]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, x1, y0, y1) = (frame.x(0.0), frame.x(frame.x_max), frame.y(0.0), frame.y(1.0));
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = frame.y(v);
        let _ = writeln!(s, r##"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="#dddddd"/>"##);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#, x0 - 6.0, y + 4.0);
    }
    for &v in x_ticks {
        let x = frame.x(v);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, y0 + 18.0, tick(v));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 16.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    s
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(frame: &Frame, xs: &[f64], ys: &[f64]) -> String {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn legend(s: &mut String, row: usize, color: &str, text: &str) {
    let y = MARGIN + 8.0 + 18.0 * row as f64;
    let x = WIDTH - MARGIN - 120.0;
    let _ = writeln!(s, r#"<rect x="{x:.2}" y="{:.2}" width="14" height="10" fill="{color}"/>"#, y - 9.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}">{}</text>"#, x + 20.0, escape(text));
}

/// PR curves of every group: a min/max band over folds and the mean line.
pub fn pr_band_svg(groups: &BTreeMap<Option<usize>, Vec<Vec<PrPoint>>>) -> Result<String> {
    if groups.is_empty() || groups.values().any(|g| g.is_empty()) {
        return Err(HarnessError::Data("no folds to plot".into()));
    }
    let frame = Frame { x_max: 1.0 };
    let ticks: Vec<f64> = (0..=5).map(|i| i as f64 / 5.0).collect();
    let mut s = open_svg("Precision-recall over folds", "recall", "precision", &frame, &ticks);
    // largest training size first so the legend reads top-down
    for (row, (size, folds)) in groups.iter().rev().enumerate() {
        let band = pr_band(folds)?;
        let color = PALETTE[row % PALETTE.len()];
        let upper = polyline(&frame, &band.recall, &band.max);
        let rev_recall: Vec<f64> = band.recall.iter().rev().copied().collect();
        let rev_min: Vec<f64> = band.min.iter().rev().copied().collect();
        let lower = polyline(&frame, &rev_recall, &rev_min);
        let _ = writeln!(s, r#"<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#);
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            polyline(&frame, &band.recall, &band.mean)
        );
        let name = match size {
            Some(n) => format!("N = {n} ({} folds)", folds.len()),
            None => format!("{} folds", folds.len()),
        };
        legend(&mut s, row, color, &name);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Mean AP against training-set size with min/max whiskers.
pub fn ap_vs_size_svg(summary: &[SizeSummary]) -> Result<String> {
    let mut rows: Vec<(usize, f64, f64, f64)> = summary
        .iter()
        .filter_map(|s| Some((s.size, s.mean_ap?, s.min_ap?, s.max_ap?)))
        .collect();
    if rows.is_empty() {
        return Err(HarnessError::Data("no successful sweep cells to plot".into()));
    }
    rows.sort_by_key(|r| r.0);
    let x_max = rows.last().unwrap().0 as f64 * 1.05;
    let frame = Frame { x_max };
    let ticks: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
    let mut s = open_svg("Average precision by training-set size", "training bags", "average precision", &frame, &ticks);
    let color = PALETTE[0];
    for &(n, _, lo, hi) in &rows {
        let x = frame.x(n as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}" stroke-opacity="0.5" stroke-width="6"/>"#,
            frame.y(lo),
            frame.y(hi)
        );
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, polyline(&frame, &xs, &ys));
    for (&x, &y) in xs.iter().zip(&ys) {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, frame.x(x), frame.y(y));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(path: impl AsRef<Path>, svg: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, svg).map_err(|e| HarnessError::io(path, e))
}
