//! Minimal deterministic SVG charts. Identical input gives identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Curve,
    Bars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let px = x0 + f * (x1 - x0);
        let py = y0 + f * (y1 - y0);
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#,
            y0 + 16.0,
            x.0 + f * (x.1 - x.0)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            x0 - 6.0,
            py + 4.0,
            y.0 + f * (y.1 - y.0)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

/// Line chart with one labeled polyline per series.
pub fn curve_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut xl, mut xh, mut yl, mut yh) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        xl = xl.min(x);
        xh = xh.max(x);
        yl = yl.min(y);
        yh = yh.max(y);
    }
    if !xl.is_finite() {
        (xl, xh, yl, yh) = (0.0, 1.0, 0.0, 1.0);
    }
    let (xs, ys) = (span(xl, xh), span(yl, yh));
    let px = |x: f64| LEFT + (x - xs.0) / (xs.1 - xs.0) * (W - RIGHT - LEFT);
    let py = |y: f64| H - BOTTOM - (y - ys.0) / (ys.1 - ys.0) * (H - BOTTOM - TOP);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, xlabel, ylabel, xs, ys);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart, one bar per label, starting from zero.
pub fn bars_svg(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let hi = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let lo = bars.iter().map(|b| b.1).fold(0.0, f64::min);
    let ys = span(lo, hi);
    let py = |y: f64| H - BOTTOM - (y - ys.0) / (ys.1 - ys.0) * (H - BOTTOM - TOP);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, "", ylabel, (0.0, bars.len() as f64), ys);
    let slot = (W - RIGHT - LEFT) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * (i as f64 + 0.15);
        let (top, bottom) = (py(v.max(0.0)), py(v.min(0.0)));
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            slot * 0.7,
            bottom - top,
            COLORS[i % COLORS.len()]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            H - BOTTOM + 30.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn read_table(path: &Path) -> CliResult<(Vec<String>, Vec<csv::StringRecord>)> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(format!("cannot open {}", path.display()), e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let records = rdr.records().collect::<Result<Vec<_>, _>>()?;
    Ok((headers, records))
}

fn column(headers: &[String], name: &str, expected: &[&str]) -> CliResult<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| {
        CliError::Csv(format!(
            "schema mismatch: expected columns [{}], found [{}]",
            expected.join(", "),
            headers.join(", ")
        ))
    })
}

fn number(rec: &csv::StringRecord, idx: usize, line: usize) -> CliResult<f64> {
    let raw = rec.get(idx).unwrap_or("");
    raw.trim()
        .parse()
        .map_err(|_| CliError::Csv(format!("row {line}: `{raw}` is not a number")))
}

/// Renders a CSV file. Curves need a `method` column naming the series plus
/// the `x` and `y` columns; bars need `label` and `value`.
pub fn plot_csv(path: &Path, kind: PlotKind, x: &str, y: &str) -> CliResult<String> {
    let (headers, records) = read_table(path)?;
    if records.is_empty() {
        return Err(CliError::Csv(format!("{} has no data rows", path.display())));
    }
    match kind {
        PlotKind::Curve => {
            let expected = ["method", x, y];
            let m = column(&headers, "method", &expected)?;
            let xi = column(&headers, x, &expected)?;
            let yi = column(&headers, y, &expected)?;
            let mut series: Vec<Series> = Vec::new();
            for (line, rec) in records.iter().enumerate() {
                let name = rec.get(m).unwrap_or("").to_string();
                let p = (number(rec, xi, line + 1)?, number(rec, yi, line + 1)?);
                match series.iter_mut().find(|s| s.name == name) {
                    Some(s) => s.points.push(p),
                    None => series.push(Series { name, points: vec![p] }),
                }
            }
            Ok(curve_svg(&path.display().to_string(), x, y, &series))
        }
        PlotKind::Bars => {
            let expected = ["label", "value"];
            let l = column(&headers, "label", &expected)?;
            let v = column(&headers, "value", &expected)?;
            let bars = records
                .iter()
                .enumerate()
                .map(|(line, rec)| Ok((rec.get(l).unwrap_or("").to_string(), number(rec, v, line + 1)?)))
                .collect::<CliResult<Vec<_>>>()?;
            Ok(bars_svg(&path.display().to_string(), "value", &bars))
        }
    }
}
