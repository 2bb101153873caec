//! Standalone SVG charts for simulation outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::failure::{Failure, Outcome};
use crate::output::{PCA_HEADER, SPECTRA_HEADER, TRAJECTORY_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Spectrum,
    Trajectory,
    Pca,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const WIDTH: f64 = 640.0;
const PANEL_HEIGHT: f64 = 300.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const MAX_SPECTRUM_LINES: usize = 6;

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

struct Panel {
    title: String,
    x_label: String,
    y_label: String,
    series: Vec<Series>,
    scatter: bool,
}

/// Reads `path` as a CSV whose header must equal `header`; every field must be numeric.
fn read_table(path: &Path, header: &[&str]) -> Outcome<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let found: Vec<String> = r
        .headers()
        .map_err(|e| Failure::usage(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header {
        return Err(Failure::usage(format!(
            "{}: expected columns {}, found {}",
            path.display(),
            header.join(","),
            found.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Failure::usage(e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| Failure::usage(format!("{}: non-numeric field in data row {}", path.display(), line + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Failure::usage(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

/// Rows grouped by their first column. Keys are bit patterns, which sort like
/// the values themselves for the non-negative step column.
fn by_step(rows: Vec<Vec<f64>>) -> BTreeMap<u64, Vec<Vec<f64>>> {
    let mut groups: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
    for row in rows {
        groups.entry(row[0].to_bits()).or_default().push(row);
    }
    groups
}

/// Up to `max` entries spread evenly, always keeping the first and last.
fn spread_pick<T>(items: Vec<T>, max: usize) -> Vec<T> {
    let n = items.len();
    if n <= max {
        return items;
    }
    let keep: Vec<usize> = (0..max).map(|j| j * (n - 1) / (max - 1)).collect();
    items
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, t)| t)
        .collect()
}

fn spectrum_panel(rows: Vec<Vec<f64>>) -> Panel {
    let groups: Vec<_> = by_step(rows).into_iter().collect();
    let series = spread_pick(groups, MAX_SPECTRUM_LINES)
        .into_iter()
        .map(|(bits, rows)| Series {
            label: format!("step {}", f64::from_bits(bits)),
            points: rows
                .iter()
                .map(|r| (r[1] + 1.0, r[2].max(1e-16).log10()))
                .collect(),
        })
        .collect();
    Panel {
        title: "Singular value spectrum".into(),
        x_label: "index".into(),
        y_label: "log10 singular value".into(),
        series,
        scatter: false,
    }
}

fn trajectory_panels(rows: Vec<Vec<f64>>) -> Vec<Panel> {
    TRAJECTORY_HEADER[1..]
        .iter()
        .enumerate()
        .map(|(j, name)| Panel {
            title: (*name).to_string(),
            x_label: "step".into(),
            y_label: (*name).to_string(),
            series: vec![Series {
                label: (*name).to_string(),
                points: rows.iter().map(|r| (r[0], r[j + 1])).collect(),
            }],
            scatter: false,
        })
        .collect()
}

fn pca_panel(rows: Vec<Vec<f64>>) -> Panel {
    let groups: Vec<_> = by_step(rows).into_iter().collect();
    let series = spread_pick(groups, 2)
        .into_iter()
        .map(|(bits, rows)| Series {
            label: format!("step {}", f64::from_bits(bits)),
            points: rows.iter().map(|r| (r[2], r[3])).collect(),
        })
        .collect();
    Panel {
        title: "First two principal components".into(),
        x_label: "pc1".into(),
        y_label: "pc2".into(),
        series,
        scatter: true,
    }
}

pub fn plot(input: &Path, kind: PlotKind, out: &Path) -> Outcome {
    let panels = match kind {
        PlotKind::Spectrum => vec![spectrum_panel(read_table(input, &SPECTRA_HEADER)?)],
        PlotKind::Trajectory => trajectory_panels(read_table(input, &TRAJECTORY_HEADER)?),
        PlotKind::Pca => vec![pca_panel(read_table(input, &PCA_HEADER)?)],
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, render(&panels))?;
    Ok(())
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" { "0".into() } else { s.to_string() }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * hi.abs().max(1.0) {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn render(panels: &[Panel]) -> String {
    let height = PANEL_HEIGHT * panels.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (p, panel) in panels.iter().enumerate() {
        draw_panel(&mut s, panel, p as f64 * PANEL_HEIGHT);
    }
    s.push_str("</svg>\n");
    s
}

fn draw_panel(s: &mut String, panel: &Panel, top: f64) {
    let x0 = MARGIN_LEFT;
    let x1 = WIDTH - MARGIN_RIGHT;
    let y0 = top + PANEL_HEIGHT - MARGIN_BOTTOM;
    let y1 = top + MARGIN_TOP;
    let (xlo, xhi) = bounds(panel.series.iter().flat_map(|ser| ser.points.iter().map(|p| p.0)));
    let (ylo, yhi) = bounds(panel.series.iter().flat_map(|ser| ser.points.iter().map(|p| p.1)));
    let sx = |x: f64| x0 + (x - xlo) / (xhi - xlo) * (x1 - x0);
    let sy = |y: f64| y0 - (y - ylo) / (yhi - ylo) * (y0 - y1);

    let _ = writeln!(s, r#"<g>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
        (x0 + x1) / 2.0,
        top + 22.0,
        escape(&panel.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = xlo + f * (xhi - xlo);
        let yv = ylo + f * (yhi - ylo);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 4.0);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, y0 + 16.0, tick(xv));
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 6.0, py + 4.0, tick(yv));
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        y0 + 36.0,
        escape(&panel.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate({:.2},{:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        x0 - 52.0,
        (y0 + y1) / 2.0,
        escape(&panel.y_label)
    );
    for (k, ser) in panel.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let finite: Vec<(f64, f64)> = ser.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        if panel.scatter {
            for (x, y) in &finite {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" fill-opacity="0.7"/>"#, sx(*x), sy(*y));
            }
        } else {
            let pts: Vec<String> = finite.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        }
        let ly = y1 + 14.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{color}"/>"#, x1 + 12.0, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, x1 + 28.0, escape(&ser.label));
    }
    let _ = writeln!(s, "</g>");
}
