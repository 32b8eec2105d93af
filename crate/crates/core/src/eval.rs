//! Regression metrics, trait correlations and report files.
//!
//! `rrmse` is relative to the mean of the measured values, and `r_squared`
//! is the coefficient of determination against the measured values (not the
//! squared Pearson correlation).

use crate::error::{Error, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Predicted values for one trait next to their measured ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedSeries {
    pub name: String,
    pub units: String,
    pub predicted: Vec<f64>,
    pub measured: Vec<f64>,
}

impl PairedSeries {
    pub fn new(
        name: impl Into<String>,
        units: impl Into<String>,
        predicted: Vec<f64>,
        measured: Vec<f64>,
    ) -> Result<Self> {
        let name = name.into();
        if predicted.len() != measured.len() {
            return Err(Error::DimensionMismatch(format!(
                "{name}: {} predicted vs {} measured",
                predicted.len(),
                measured.len()
            )));
        }
        if predicted.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "{name}: need at least 2 pairs, got {}",
                predicted.len()
            )));
        }
        if predicted.iter().chain(&measured).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("{name}: non-finite value")));
        }
        Ok(Self {
            name,
            units: units.into(),
            predicted,
            measured,
        })
    }

    pub fn len(&self) -> usize {
        self.measured.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measured.is_empty()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sum_sq_residuals(s: &PairedSeries) -> f64 {
    s.measured.iter().zip(&s.predicted).map(|(m, p)| (m - p).powi(2)).sum()
}

pub fn r_squared(s: &PairedSeries) -> Result<f64> {
    let m = mean(&s.measured);
    let ss_tot: f64 = s.measured.iter().map(|v| (v - m).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return Err(Error::InvalidInput(format!(
            "{}: measured values have zero variance",
            s.name
        )));
    }
    Ok(1.0 - sum_sq_residuals(s) / ss_tot)
}

pub fn rmse(s: &PairedSeries) -> f64 {
    (sum_sq_residuals(s) / s.len() as f64).sqrt()
}

/// RMSE as a percentage of the mean measured value.
pub fn rrmse(s: &PairedSeries) -> Result<f64> {
    let m = mean(&s.measured);
    if m == 0.0 {
        return Err(Error::InvalidInput(format!("{}: measured mean is zero", s.name)));
    }
    Ok(100.0 * rmse(s) / m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub name: String,
    pub n: usize,
    /// `None` when the measured values are constant.
    pub r_squared: Option<f64>,
    pub rmse: f64,
    /// `None` when the measured mean is zero.
    pub rrmse_pct: Option<f64>,
}

pub fn metrics(s: &PairedSeries) -> Metrics {
    Metrics {
        name: s.name.clone(),
        n: s.len(),
        r_squared: r_squared(s).ok(),
        rmse: rmse(s),
        rrmse_pct: rrmse(s).ok(),
    }
}

/// Symmetric matrix of Pearson correlations between named vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::InvalidInput("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn correlation_matrix(series: &[(String, Vec<f64>)]) -> Result<CorrelationMatrix> {
    if let Some((_, first)) = series.first() {
        if first.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "correlation needs at least 2 samples, got {}",
                first.len()
            )));
        }
    }
    for (name, v) in series {
        if v.len() != series[0].1.len() {
            return Err(Error::DimensionMismatch(format!(
                "{name} has {} values, expected {}",
                v.len(),
                series[0].1.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("{name} has a non-finite value")));
        }
        let m = mean(v);
        if v.iter().all(|x| *x == m) {
            return Err(Error::InvalidInput(format!("{name} has zero variance")));
        }
    }
    let k = series.len();
    let mut values = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let r = pearson(&series[i].1, &series[j].1)?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        names: series.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

// ---------------------------------------------------------------------------
// Report files

/// Paths written by [`report`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub correlations: Option<PathBuf>,
    pub scatters: Vec<PathBuf>,
    pub heatmap: Option<PathBuf>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("csv error on {}: {other:?}", path.display())),
    }
}

/// Writes metrics.csv, one scatter plot per series and, given a matrix,
/// corr.csv and heatmap.svg. Identical inputs give identical bytes.
pub fn report(series: &[PairedSeries], corr: Option<&CorrelationMatrix>, out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = ReportFiles {
        metrics: out_dir.join("metrics.csv"),
        ..Default::default()
    };

    let mut w = csv::Writer::from_path(&files.metrics).map_err(|e| csv_err(&files.metrics, e))?;
    w.write_record(["trait", "units", "n", "r2", "rmse", "rrmse_pct"])
        .map_err(|e| csv_err(&files.metrics, e))?;
    for s in series {
        let m = metrics(s);
        w.write_record([
            m.name.clone(),
            s.units.clone(),
            m.n.to_string(),
            fmt_opt(m.r_squared),
            format!("{:.6}", m.rmse),
            fmt_opt(m.rrmse_pct),
        ])
        .map_err(|e| csv_err(&files.metrics, e))?;
    }
    w.flush().map_err(|e| Error::io(&files.metrics, e))?;

    for s in series {
        let path = out_dir.join(format!("scatter_{}.svg", file_stem(&s.name)));
        write_file(&path, &scatter_svg(s))?;
        files.scatters.push(path);
    }

    if let Some(c) = corr {
        let path = out_dir.join("corr.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut header = vec![String::new()];
        header.extend(c.names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for (name, row) in c.names.iter().zip(&c.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.correlations = Some(path);

        let path = out_dir.join("heatmap.svg");
        write_file(&path, &heatmap_svg(c))?;
        files.heatmap = Some(path);
    }
    Ok(files)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PLOT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Predicted against measured on shared axes, with the identity line.
pub fn scatter_svg(s: &PairedSeries) -> String {
    let (lo, hi) = s
        .predicted
        .iter()
        .chain(&s.measured)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 1.0 };
    let (lo, hi) = (lo - pad, hi + pad);
    let sx = |v: f64| MARGIN + (v - lo) / (hi - lo) * PLOT;
    let sy = |v: f64| MARGIN + PLOT - (v - lo) / (hi - lo) * PLOT;
    let size = PLOT + 2.0 * MARGIN;
    let name = xml_escape(&s.name);
    let units = xml_escape(&s.units);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0}" height="{size:.0}" viewBox="0 0 {size:.0} {size:.0}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN:.1}" y="{MARGIN:.1}" width="{PLOT:.1}" height="{PLOT:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 4"/>"##,
        sx(lo),
        sy(lo),
        sx(hi),
        sy(hi)
    );
    for (p, m) in s.predicted.iter().zip(&s.measured) {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##,
            sx(*m),
            sy(*p)
        );
    }
    for (v, anchor) in [(lo + pad, "start"), (hi - pad, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="{anchor}">{v:.3}</text>"#,
            sx(v),
            MARGIN + PLOT + 15.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">measured {name} ({units})</text>"#,
        MARGIN + PLOT / 2.0,
        size - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.1})">predicted {name} ({units})</text>"#,
        MARGIN + PLOT / 2.0,
        MARGIN + PLOT / 2.0
    );
    let m = metrics(s);
    let r2 = m.r_squared.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
    let rr = m.rrmse_pct.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}%"));
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="13">R² = {r2}  RMSE = {:.3}  rRMSE = {rr}  n = {}</text>"#,
        MARGIN + 8.0,
        MARGIN + 18.0,
        m.rmse,
        m.n
    );
    out.push_str("</svg>\n");
    out
}

/// Diverging blue-white-red color for a correlation in [-1, 1].
fn corr_color(r: f64) -> String {
    let t = r.clamp(-1.0, 1.0);
    let (red, green, blue) = if t >= 0.0 {
        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
    } else {
        (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
    };
    format!(
        "#{:02x}{:02x}{:02x}",
        red.round() as u8,
        green.round() as u8,
        blue.round() as u8
    )
}

pub fn heatmap_svg(c: &CorrelationMatrix) -> String {
    let k = c.names.len();
    let cell = 60.0;
    let label = 110.0;
    let size = label + cell * k as f64 + 10.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0}" height="{size:.0}" viewBox="0 0 {size:.0} {size:.0}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, name) in c.names.iter().enumerate() {
        let name = xml_escape(name);
        let mid = label + cell * (i as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{mid:.1}" font-size="12" text-anchor="end" dominant-baseline="middle">{name}</text>"#,
            label - 6.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{mid:.1}" y="{:.1}" font-size="12" text-anchor="start" transform="rotate(-90 {mid:.1} {:.1})">{name}</text>"#,
            label - 6.0,
            label - 6.0
        );
    }
    for (i, row) in c.values.iter().enumerate() {
        for (j, &r) in row.iter().enumerate() {
            let (x, y) = (label + cell * j as f64, label + cell * i as f64);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="{}" stroke="white"/>"#,
                corr_color(r)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle" dominant-baseline="middle">{r:.2}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
