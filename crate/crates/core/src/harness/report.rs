//! Report files: JSON metrics, CSV score records, score histograms.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::eval::{MetricsReport, ScoreRecord};

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Histogram,
}

pub const ALL_FORMATS: [ReportFormat; 3] = [
    ReportFormat::Json,
    ReportFormat::Csv,
    ReportFormat::Histogram,
];

/// Two-class histogram over uniform bins spanning the observed range.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

impl Histogram {
    pub fn new(scores: &[(f64, bool)], bins: usize) -> Result<Self> {
        if scores.is_empty() || bins == 0 {
            return Err(Error::Data("histogram needs scores and bins".into()));
        }
        let lo = scores.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let hi = scores.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        let mut h = Histogram {
            lo,
            hi,
            normal: vec![0; bins],
            anomalous: vec![0; bins],
        };
        for &(s, anomalous) in scores {
            let b = h.bin_of(s);
            if anomalous {
                h.anomalous[b] += 1;
            } else {
                h.normal[b] += 1;
            }
        }
        Ok(h)
    }

    pub fn bins(&self) -> usize {
        self.normal.len()
    }

    fn bin_of(&self, s: f64) -> usize {
        let n = self.bins();
        if self.hi <= self.lo {
            return 0;
        }
        (((s - self.lo) / (self.hi - self.lo) * n as f64) as usize).min(n - 1)
    }

    pub fn edges(&self, b: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.bins() as f64;
        (self.lo + w * b as f64, self.lo + w * (b + 1) as f64)
    }

    pub fn total(&self) -> usize {
        self.normal.iter().chain(&self.anomalous).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,normal,anomalous\n");
        for b in 0..self.bins() {
            let (lo, hi) = self.edges(b);
            writeln!(s, "{lo:e},{hi:e},{},{}", self.normal[b], self.anomalous[b])
                .expect("string write");
        }
        s
    }

    /// Bar chart: normal counts in blue, anomalous in red, overlap purple.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (bar_w, height) = (8u32, 160u32);
        let width = bar_w * self.bins() as u32;
        let peak = self
            .normal
            .iter()
            .chain(&self.anomalous)
            .copied()
            .max()
            .unwrap_or(0)
            .max(1);
        let scale = |c: usize| (c as f64 / peak as f64 * (height - 1) as f64).round() as u32;
        let img = image::RgbImage::from_fn(width, height, |x, y| {
            let b = (x / bar_w) as usize;
            let from_bottom = height - 1 - y;
            let n = from_bottom < scale(self.normal[b]);
            let a = from_bottom < scale(self.anomalous[b]);
            match (n, a) {
                (true, true) => image::Rgb([150, 60, 170]),
                (true, false) => image::Rgb([60, 110, 220]),
                (false, true) => image::Rgb([220, 70, 60]),
                _ => image::Rgb([255, 255, 255]),
            }
        });
        img.save(path).map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })
    }
}

pub fn records_csv(records: &[ScoreRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

pub fn report_json(report: &MetricsReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Serde(e.to_string()))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the requested formats into `dir` and returns the files written.
///
/// `metrics.json` holds the whole report; `scores_<entry>.csv` one row per
/// test sample; `hist_<entry>_<score>.{csv,png}` a histogram for each
/// branch score and the fused score.
pub fn emit_report(
    report: &MetricsReport,
    dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    if formats.contains(&ReportFormat::Json) {
        out.push(write(dir.join("metrics.json"), &report_json(report)?)?);
    }
    for e in &report.entries {
        let tag = sanitize(&e.name);
        if formats.contains(&ReportFormat::Csv) {
            out.push(write(
                dir.join(format!("scores_{tag}.csv")),
                &records_csv(&e.records)?,
            )?);
        }
        if formats.contains(&ReportFormat::Histogram) {
            let series: [(&str, fn(&ScoreRecord) -> Option<f64>); 3] = [
                ("encoder", |r| r.encoder_score),
                ("decoder", |r| r.decoder_score),
                ("fused", |r| Some(r.fused)),
            ];
            for (name, f) in series {
                let pts: Option<Vec<(f64, bool)>> = e
                    .records
                    .iter()
                    .map(|r| f(r).map(|s| (s, r.label == 0)))
                    .collect();
                let Some(pts) = pts else { continue };
                let h = Histogram::new(&pts, HISTOGRAM_BINS)?;
                out.push(write(
                    dir.join(format!("hist_{tag}_{name}.csv")),
                    &h.to_csv(),
                )?);
                let png = dir.join(format!("hist_{tag}_{name}.png"));
                h.write_png(&png)?;
                out.push(png);
            }
        }
    }
    Ok(out)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
