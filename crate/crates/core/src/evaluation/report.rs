use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};

/// Values of one metric over increasing horizons.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    horizons_ms: Vec<f64>,
    values: Vec<f64>,
    pub sample_count: usize,
    pub clip: Option<f64>,
    /// Grouping threshold of multimodal metrics.
    pub threshold: Option<f64>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, horizons_ms: Vec<f64>, values: Vec<f64>, sample_count: usize) -> Result<Self> {
        if horizons_ms.len() != values.len() || horizons_ms.is_empty() {
            return invalid(format!("{} horizons for {} values", horizons_ms.len(), values.len()));
        }
        if horizons_ms.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("horizons must be strictly increasing");
        }
        Ok(Self { name: name.into(), horizons_ms, values, sample_count, clip: None, threshold: None })
    }

    /// Report over steps `1..=values.len()` at the given frame rate.
    pub fn per_step(name: impl Into<String>, values: Vec<f64>, fps: f64, sample_count: usize) -> Result<Self> {
        if !(fps > 0.0) {
            return invalid(format!("fps must be positive, got {fps}"));
        }
        let horizons = (1..=values.len()).map(|t| 1000.0 * t as f64 / fps).collect();
        Self::new(name, horizons, values, sample_count)
    }

    pub fn horizons_ms(&self) -> &[f64] {
        &self.horizons_ms
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon_ms,value\n");
        for (h, v) in self.horizons_ms.iter().zip(&self.values) {
            let _ = writeln!(out, "{h},{v}");
        }
        out
    }

    pub fn from_csv(name: impl Into<String>, text: &str, sample_count: usize) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "horizon_ms,value")) => {}
            _ => return Err(Error::Parse { line: 1, message: "expected header `horizon_ms,value`".into() }),
        }
        let mut h = Vec::new();
        let mut v = Vec::new();
        for (i, line) in lines {
            let bad = || Error::Parse { line: i + 1, message: format!("malformed row `{line}`") };
            let (a, b) = line.split_once(',').ok_or_else(bad)?;
            h.push(a.trim().parse().map_err(|_| bad())?);
            v.push(b.trim().parse().map_err(|_| bad())?);
        }
        Self::new(name, h, v, sample_count)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "metric": self.name,
            "horizons_ms": self.horizons_ms,
            "values": self.values,
            "sample_count": self.sample_count,
            "clip": self.clip,
            "threshold": self.threshold,
        })
    }

    /// JSON summary of several reports.
    pub fn summary_json(reports: &[MetricReport]) -> String {
        let all: Vec<_> = reports.iter().map(|r| r.to_json_value()).collect();
        serde_json::to_string_pretty(&serde_json::json!({ "metrics": all })).expect("json values serialize")
    }

    pub fn series(&self) -> Series {
        Series { label: self.name.clone(), points: self.horizons_ms.iter().copied().zip(self.values.iter().copied()).collect() }
    }
}

/// One labelled polyline of a chart.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG line chart with axes, ticks and a legend.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (l, r, t, b) = (70.0, 150.0, 40.0, 50.0);
    let finite = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        (l + w - r) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{l} {t} V{} H{}" fill="none" stroke="black"/>"#,
        h - b,
        w - r
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            px(xv),
            h - b + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            l - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        (l + w - r) / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{0}" transform="rotate(-90 16 {0})" text-anchor="middle" font-family="sans-serif" font-size="12">{1}</text>"#,
        (t + h - b) / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let ly = t + 16.0 * i as f64 + 8.0;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - r + 10.0, w - r + 30.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            w - r + 35.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 100.0).round() / 100.0)
    }
}
