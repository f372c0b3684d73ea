//! Report artifacts: JSON documents, CSV tables and SVG plots, each carrying
//! the same provenance header.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Who produced an artifact and from what.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Omitted for byte-identical reruns.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
    pub seeds: Vec<u64>,
    /// Command-line overrides as `key=value`, in the order given.
    pub overrides: Vec<String>,
    /// Effective configuration, TOML.
    pub config: String,
}

impl Provenance {
    fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("tool: {} {}", self.tool, self.version),
            format!("command: {}", self.command),
        ];
        if let Some(c) = &self.created {
            out.push(format!("created: {c}"));
        }
        out.push(format!(
            "seeds: {}",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
        ));
        out.push(format!("overrides: {}", self.overrides.join(" ")));
        for l in self.config.lines() {
            out.push(format!("config: {l}"));
        }
        out
    }
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

/// `{"provenance": …, <fields of body>}`; `body` must serialize to a map.
pub fn write_json<T: Serialize>(path: &Path, provenance: &Provenance, body: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(&Document { provenance, body })?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// CSV with `# `-prefixed provenance lines ahead of the header row.
pub fn write_csv(path: &Path, provenance: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    for l in provenance.lines() {
        out.push_str("# ");
        out.push_str(&l);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    std::fs::write(path, out)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(out: &mut String, provenance: &Provenance, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    out.push_str("<!--\n");
    for l in provenance.lines() {
        // "--" is not allowed inside XML comments
        let _ = writeln!(out, "{}", l.replace("--", "- -"));
    }
    out.push_str("-->\n");
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        escape(title)
    );
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct LineSeries<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line plot with optional horizontal and vertical reference lines
/// (threshold, leak start).
pub fn line_plot(
    provenance: &Provenance,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[LineSeries<'_>],
    h_line: Option<f64>,
    v_line: Option<f64>,
) -> String {
    let (w, h) = (800.0, 360.0);
    let (l, r, t, b) = (60.0, 20.0, 30.0, 40.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some(v) = h_line {
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let sy = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut out = String::new();
    svg_open(&mut out, provenance, w, h, title);
    let _ = writeln!(
        out,
        r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        w - l - r,
        h - t - b
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            h - b + 14.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            l - 4.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (l + w - r) / 2.0,
        h - 6.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (t + h - b) / 2.0,
        (t + h - b) / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let mut d = String::new();
        let mut pen = false;
        for &(x, y) in &s.points {
            if !(x.is_finite() && y.is_finite()) {
                pen = false;
                continue;
            }
            let _ = write!(d, "{}{:.1},{:.1} ", if pen { "L" } else { "M" }, sx(x), sy(y));
            pen = true;
        }
        let c = PALETTE[k % PALETTE.len()];
        let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{c}" stroke-width="1"/>"#, d.trim_end());
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{c}">{}</text>"#,
            l + 8.0,
            t + 14.0 + 13.0 * k as f64,
            escape(s.name)
        );
    }
    if let Some(v) = h_line {
        let _ = writeln!(
            out,
            r#"<line x1="{l}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
            w - r,
            sy(v),
            sy(v)
        );
    }
    if let Some(v) = v_line.filter(|v| *v >= x0 && *v <= x1) {
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" x2="{:.1}" y1="{t}" y2="{:.1}" stroke="gray" stroke-dasharray="2 2"/>"#,
            sx(v),
            sx(v),
            h - b
        );
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

/// Heatmap of `values[row * xs.len() + col]` with rows along `ys`; missing
/// cells are drawn grey.
pub fn heatmap(
    provenance: &Provenance,
    title: &str,
    x_label: &str,
    y_label: &str,
    xs: &[f64],
    ys: &[f64],
    values: &[Option<f64>],
) -> String {
    let (w, h) = (520.0, 460.0);
    let (l, r, t, b) = (70.0, 20.0, 30.0, 50.0);
    let cw = (w - l - r) / xs.len().max(1) as f64;
    let ch = (h - t - b) / ys.len().max(1) as f64;
    let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::new();
    svg_open(&mut out, provenance, w, h, title);
    for (row, y) in ys.iter().enumerate() {
        for (col, x) in xs.iter().enumerate() {
            let v = values.get(row * xs.len() + col).copied().flatten();
            let fill = match v {
                Some(v) if v.is_finite() => {
                    let f = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    let c = (255.0 * (1.0 - f)).round() as u8;
                    format!("rgb(255,{c},{c})")
                }
                _ => "#ccc".to_string(),
            };
            let px = l + col as f64 * cw;
            let py = h - b - (row + 1) as f64 * ch;
            let _ = writeln!(
                out,
                r#"<rect x="{px:.1}" y="{py:.1}" width="{cw:.1}" height="{ch:.1}" fill="{fill}" stroke="white"/>"#
            );
            if let Some(v) = v {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="9">{}</text>"#,
                    px + cw / 2.0,
                    py + ch / 2.0 + 3.0,
                    tick(v)
                );
            }
            if row == 0 {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                    px + cw / 2.0,
                    h - b + 14.0,
                    tick(*x)
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            l - 4.0,
            h - b - (row as f64 + 0.5) * ch + 4.0,
            tick(*y)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (l + w - r) / 2.0,
        h - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (t + h - b) / 2.0,
        (t + h - b) / 2.0,
        escape(y_label)
    );
    out.push_str("</svg>\n");
    out
}
