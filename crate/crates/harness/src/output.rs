//! CSV tables and the JSON run manifest.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::experiments::{ExperimentRecord, RatioSummary, SweepSummary};

pub const COMPARE_HEADER: [&str; 12] = [
    "image_id",
    "label",
    "class",
    "k",
    "k2",
    "cam_gap",
    "corgi_r",
    "attack_eps",
    "ratio",
    "backend",
    "config_hash",
    "status",
];

pub const GAP_SWEEP_HEADER: [&str; 6] = ["image_id", "k", "cam_gap", "corgi_r", "attack_eps", "status"];

/// Shortest round-trip form; `inf` for infinity.
pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn eps_cell(eps: Option<f64>) -> String {
    fmt_f64(eps.unwrap_or(f64::INFINITY))
}

fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()
}

pub fn write_compare_csv(path: &Path, rows: &[ExperimentRecord]) -> std::io::Result<()> {
    write_table(
        path,
        &COMPARE_HEADER,
        rows.iter().map(|r| {
            vec![
                r.image_id.clone(),
                opt(r.label),
                r.class.to_string(),
                r.k.to_string(),
                opt(r.k2),
                fmt_f64(r.cam_gap),
                fmt_f64(r.corgi_r),
                eps_cell(r.attack_eps),
                r.ratio.map(fmt_f64).unwrap_or_default(),
                r.backend.to_string(),
                r.config_hash.clone(),
                r.status.as_str().to_string(),
            ]
        }),
    )
}

pub fn write_ratio_summary(path: &Path, s: &RatioSummary) -> std::io::Result<()> {
    write_table(
        path,
        &[
            "images",
            "ties",
            "attack_failures",
            "violations",
            "finite_ratios",
            "outliers",
            "median_ratio",
        ],
        [vec![
            s.images.to_string(),
            s.ties.to_string(),
            s.attack_failures.to_string(),
            s.violations.to_string(),
            s.finite_ratios.to_string(),
            s.outliers.to_string(),
            s.median_ratio.map(fmt_f64).unwrap_or_default(),
        ]],
    )
}

pub fn write_gap_sweep_csv(path: &Path, rows: &[ExperimentRecord]) -> std::io::Result<()> {
    write_table(
        path,
        &GAP_SWEEP_HEADER,
        rows.iter().map(|r| {
            vec![
                r.image_id.clone(),
                r.k.to_string(),
                fmt_f64(r.cam_gap),
                fmt_f64(r.corgi_r),
                eps_cell(r.attack_eps),
                r.status.as_str().to_string(),
            ]
        }),
    )
}

pub fn write_sweep_summary(path: &Path, rows: &[SweepSummary]) -> std::io::Result<()> {
    write_table(
        path,
        &["image_id", "points", "spearman_gap_r", "spearman_gap_eps"],
        rows.iter().map(|s| {
            vec![
                s.image_id.clone(),
                s.points.to_string(),
                s.spearman_gap_r.map(fmt_f64).unwrap_or_default(),
                s.spearman_gap_eps.map(fmt_f64).unwrap_or_default(),
            ]
        }),
    )
}

#[derive(Debug, Serialize)]
pub struct TimingEntry {
    pub image_id: String,
    pub k: usize,
    pub seconds: f64,
}

impl From<&ExperimentRecord> for TimingEntry {
    fn from(r: &ExperimentRecord) -> Self {
        Self {
            image_id: r.image_id.clone(),
            k: r.k,
            seconds: r.seconds,
        }
    }
}

/// Everything needed to reproduce a run, plus wall-clock timings (which are
/// kept out of the CSVs so reruns compare byte for byte).
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub model: String,
    pub model_sha256: String,
    pub seed: u64,
    pub jobs: usize,
    pub config: serde_json::Value,
    pub config_hash: Option<String>,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
    pub total_seconds: f64,
    pub timings: Vec<TimingEntry>,
}

impl Manifest {
    pub fn new(command: &str, model: &Path, model_sha256: &str, seed: u64, jobs: usize) -> Self {
        Self {
            tool: "camcert",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            model: model.display().to_string(),
            model_sha256: model_sha256.to_string(),
            seed,
            jobs,
            config: serde_json::Value::Null,
            config_hash: None,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
            total_seconds: 0.0,
            timings: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), text + "\n")
    }
}
