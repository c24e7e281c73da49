//! Per-image experiment: CAM gap, certified radius and attack threshold.

use std::time::Instant;

use camcert::attack::{attack_threshold_search, AttackConfig};
use camcert::cam::{cam_gap, compute_cam};
use camcert::certify::{certify_binary_search, CertConfig, CertMode};
use camcert::{Backend, NetworkSpec, Result, Tensor};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::stats::{median, spearman};

/// Ratios above this are reported as outliers and kept out of the median.
pub const OUTLIER_RATIO: f64 = 20.0;

#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub k: usize,
    /// Relaxed certificate when set; the attack still targets the exact top-k.
    pub k2: Option<usize>,
    pub cert: CertConfig,
    pub attack: AttackConfig,
    pub epsilon_hi: f64,
    pub search_iterations: usize,
}

impl Settings {
    /// Short hash of the settings and the model digest, stamped on every row.
    pub fn config_hash(&self, model_sha256: &str) -> String {
        let json = serde_json::to_string(&(self, model_sha256)).expect("settings serialize");
        sha256_hex(json.as_bytes())[..16].to_string()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// `I_[k] == I_[k+1]`; nothing can be certified.
    Tie,
    /// No successful attack up to `epsilon_hi`.
    AttackFailed,
    /// Certified radius above a found attack: the certificate is wrong.
    Violation,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Tie => "tie",
            Status::AttackFailed => "attack_failed",
            Status::Violation => "violation",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRecord {
    pub image_id: String,
    pub label: Option<usize>,
    pub class: usize,
    pub k: usize,
    pub k2: Option<usize>,
    pub cam_gap: f64,
    pub corgi_r: f64,
    /// `None` when no attack up to `epsilon_hi` succeeded (reported as `inf`).
    pub attack_eps: Option<f64>,
    pub ratio: Option<f64>,
    pub backend: Backend,
    pub config_hash: String,
    pub status: Status,
    #[serde(skip)]
    pub seconds: f64,
}

pub struct ImageInput<'a> {
    pub id: &'a str,
    pub label: Option<usize>,
    pub image: &'a Tensor,
}

pub fn evaluate(
    net: &NetworkSpec,
    input: &ImageInput<'_>,
    settings: &Settings,
    config_hash: &str,
) -> Result<ExperimentRecord> {
    let start = Instant::now();
    let k = settings.k;
    let cam = compute_cam(net, input.image, settings.cert.class_index)?;
    let gap = cam_gap(&cam, k)?;
    let mode = match settings.k2 {
        Some(k2) => CertMode::Relaxed { k2 },
        None => CertMode::Exact,
    };
    let cert = certify_binary_search(net, input.image, k, mode, &settings.cert)?;
    let mut attack = settings.attack.clone();
    attack.class_index = Some(cam.class_index);
    let search = attack_threshold_search(
        net,
        input.image,
        k,
        &attack,
        settings.epsilon_hi,
        settings.search_iterations,
    )?;
    let r = cert.radius;
    let eps = search.epsilon;
    let ratio = if r > 0.0 {
        Some(eps.map_or(f64::INFINITY, |e| e / r))
    } else {
        None
    };
    let status = if cert.note.as_deref() == Some("tie") {
        Status::Tie
    } else if matches!((settings.k2, eps), (None, Some(e)) if r > e) {
        Status::Violation
    } else if eps.is_none() {
        Status::AttackFailed
    } else {
        Status::Ok
    };
    log::info!(
        "{} k={k}: gap={gap:e} r={r:e} eps={} ({:.2}s)",
        input.id,
        eps.map_or("inf".to_string(), |e| format!("{e:e}")),
        start.elapsed().as_secs_f64()
    );
    Ok(ExperimentRecord {
        image_id: input.id.to_string(),
        label: input.label,
        class: cam.class_index,
        k,
        k2: settings.k2,
        cam_gap: gap,
        corgi_r: r,
        attack_eps: eps,
        ratio,
        backend: settings.cert.backend,
        config_hash: config_hash.to_string(),
        status,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Evaluates every image on the current rayon pool; rows come back sorted by id.
pub fn evaluate_all(
    net: &NetworkSpec,
    inputs: &[ImageInput<'_>],
    settings: &Settings,
    config_hash: &str,
) -> Result<Vec<ExperimentRecord>> {
    let mut rows = inputs
        .par_iter()
        .map(|input| evaluate(net, input, settings, config_hash))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(a.k.cmp(&b.k)));
    Ok(rows)
}

/// One image over a range of `k`, rows in ascending `k`.
pub fn sweep_k(
    net: &NetworkSpec,
    input: &ImageInput<'_>,
    ks: &[usize],
    settings: &Settings,
    config_hash: &str,
) -> Result<Vec<ExperimentRecord>> {
    ks.par_iter()
        .map(|&k| {
            let mut s = settings.clone();
            s.k = k;
            evaluate(net, input, &s, config_hash)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioSummary {
    pub images: usize,
    pub ties: usize,
    pub attack_failures: usize,
    pub violations: usize,
    /// Ratios at most [`OUTLIER_RATIO`], which enter the median.
    pub finite_ratios: usize,
    pub outliers: usize,
    pub median_ratio: Option<f64>,
}

pub fn summarize_ratios(rows: &[ExperimentRecord]) -> RatioSummary {
    let count = |s: Status| rows.iter().filter(|r| r.status == s).count();
    let ratios: Vec<f64> = rows.iter().filter_map(|r| r.ratio).collect();
    let kept: Vec<f64> = ratios.iter().copied().filter(|&q| q <= OUTLIER_RATIO).collect();
    RatioSummary {
        images: rows.len(),
        ties: count(Status::Tie),
        attack_failures: count(Status::AttackFailed),
        violations: count(Status::Violation),
        finite_ratios: kept.len(),
        outliers: ratios.len() - kept.len(),
        median_ratio: median(&kept),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub image_id: String,
    pub points: usize,
    pub spearman_gap_r: Option<f64>,
    /// Failed attacks rank as `ε̂ = ∞`.
    pub spearman_gap_eps: Option<f64>,
}

pub fn summarize_sweep(image_id: &str, rows: &[ExperimentRecord]) -> SweepSummary {
    let gaps: Vec<f64> = rows.iter().map(|r| r.cam_gap).collect();
    let radii: Vec<f64> = rows.iter().map(|r| r.corgi_r).collect();
    let eps: Vec<f64> = rows
        .iter()
        .map(|r| r.attack_eps.unwrap_or(f64::INFINITY))
        .collect();
    SweepSummary {
        image_id: image_id.to_string(),
        points: rows.len(),
        spearman_gap_r: spearman(&gaps, &radii),
        spearman_gap_eps: spearman(&gaps, &eps),
    }
}
