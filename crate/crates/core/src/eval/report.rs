use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA: &str = "ENTAILKIT-REPORT-1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_hash: String,
    pub config_hash: String,
    pub seed: u64,
    /// Artifact name → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    /// Ratios in `[0, 1]`.
    pub metrics: BTreeMap<String, f64>,
    /// Unbounded quantities: counts, losses, kappa, standard deviations.
    pub values: BTreeMap<String, f64>,
    pub provenance: Provenance,
}

impl MetricsReport {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            metrics: BTreeMap::new(),
            values: BTreeMap::new(),
            provenance,
        }
    }

    /// Records a ratio metric; values outside `[0, 1]` are rejected.
    pub fn metric(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Validation(format!("metric `{name}` = {value} outside [0, 1]")));
        }
        self.metrics.insert(name, value);
        Ok(())
    }

    pub fn value(&mut self, name: impl Into<String>, value: f64) {
        self.values.insert(name.into(), value);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Validation(format!("unsupported report schema `{}`", r.schema)));
        }
        Ok(r)
    }
}

/// A small rectangular table rendered as CSV or aligned text.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in std::iter::once(&self.headers).chain(&self.rows) {
            let line: Vec<String> = row.iter().map(|f| csv_field(f)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let cols = self.headers.len();
        let width: Vec<usize> = (0..cols)
            .map(|c| {
                std::iter::once(&self.headers)
                    .chain(&self.rows)
                    .map(|r| r.get(c).map_or(0, |s| s.chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let fmt_row = |r: &Vec<String>| {
            let cells: Vec<String> = (0..cols)
                .map(|c| format!("{:<w$}", r.get(c).map_or("", String::as_str), w = width[c]))
                .collect();
            cells.join(" | ").trim_end().to_string()
        };
        let mut out = fmt_row(&self.headers);
        out.push('\n');
        out.push_str(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&fmt_row(r));
            out.push('\n');
        }
        out
    }
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 40.0;

fn svg_frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n{body}</svg>\n",
        W / 2.0,
        svg_escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    )
}

/// Vertical bars scaled to the largest value.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let max = bars.iter().map(|(_, v)| *v).fold(0.0, f64::max).max(1e-12);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let mut body = String::new();
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = (H - 2.0 * PAD) * v.max(0.0) / max;
        let x = PAD + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            body,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"steelblue\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{v:.3}</text>",
            H - PAD - h,
            slot * 0.7,
            x + slot * 0.35,
            H - PAD + 14.0,
            svg_escape(label),
            x + slot * 0.35,
            H - PAD - h - 4.0
        );
    }
    svg_frame(title, &body)
}

/// One polyline per series over a shared x axis of step indices.
pub fn line_chart_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    const COLORS: [&str; 6] = ["steelblue", "darkorange", "seagreen", "crimson", "purple", "gray"];
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi.max(lo + 1e-12)) } else { (0.0, 1.0) };
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let mut body = String::new();
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| {
                let x = PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
                let y = H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            body,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            pts.join(" "),
            W - PAD - 90.0,
            PAD + 12.0 * k as f64,
            svg_escape(name)
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"4\" y=\"{PAD}\" font-family=\"sans-serif\" font-size=\"10\">{hi:.3}</text>\n\
         <text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{lo:.3}</text>",
        H - PAD
    );
    svg_frame(title, &body)
}
