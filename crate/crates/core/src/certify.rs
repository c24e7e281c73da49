//! Certified radii for the top-k CAM pixel set.
//!
//! A radius `δ` is certified when the CAM bounds over the δ-ball separate the
//! original top-k pixels from the rest: the smallest lower bound inside the
//! set is at least the largest upper bound outside it (exact mode), or at
//! least the `(k2 - k + 1)`-th largest upper bound outside it (relaxed mode,
//! which keeps the original top-k inside the perturbed top-`k2`).

use serde::{Deserialize, Serialize};

use crate::bounds::{cam_bounds, Backend, BoundMaps, PerturbationBall, UNIT_BOX};
use crate::cam::{compute_cam, top_k, TopKSet};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::tensor::Tensor;

/// Margin every certificate comparison must clear, absorbing round-to-nearest
/// error in bound propagation.
pub const SOUNDNESS_SLACK: f64 = 1e-9;

pub const DEFAULT_SEARCH_ITERATIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertMethod {
    ExactTopK,
    RelaxedTopK,
    Lipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CertMode {
    Exact,
    /// Original top-k must stay within the perturbed top-`k2`.
    Relaxed { k2: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertConfig {
    pub backend: Backend,
    /// Bisection steps after probing the top of the `[0, 1]` bracket.
    pub iterations: usize,
    pub clip: Option<(f64, f64)>,
    /// Class whose CAM is certified; the predicted class when `None`.
    pub class_index: Option<usize>,
}

impl Default for CertConfig {
    fn default() -> Self {
        Self {
            backend: Backend::LinearRelax,
            iterations: DEFAULT_SEARCH_ITERATIONS,
            clip: Some(UNIT_BOX),
            class_index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertResult {
    /// Largest radius that passed the certificate check (0 if none did).
    pub radius: f64,
    pub method: CertMethod,
    pub k: usize,
    pub k2: Option<usize>,
    pub backend: Option<Backend>,
    pub class_index: usize,
    pub iterations: usize,
    /// `[largest passing radius, smallest failing radius]` seen by the search.
    pub bracket: (f64, f64),
    pub top_k: TopKSet,
    pub clipped: bool,
    /// Set when the result was short-circuited, e.g. `"tie"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// A separately supplied classification-robustness radius folded in with `min`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification_radius: Option<f64>,
}

impl CertResult {
    /// Certificate for both interpretation and classification: the smaller of the two radii.
    pub fn with_classification_radius(mut self, radius: f64) -> Self {
        self.classification_radius = Some(radius);
        self.radius = self.radius.min(radius);
        self
    }
}

/// `min L(δ)` over the top-k and `max U(δ)` over the rest.
fn split_extremes(bounds: &BoundMaps, top: &TopKSet) -> (f64, f64) {
    let mask = top.mask(bounds.lower.len());
    let min_top = top
        .positions
        .iter()
        .map(|&p| bounds.lower.data()[p])
        .fold(f64::INFINITY, f64::min);
    let max_rest = bounds
        .upper
        .data()
        .iter()
        .zip(&mask)
        .filter(|(_, &inside)| !inside)
        .map(|(&u, _)| u)
        .fold(f64::NEG_INFINITY, f64::max);
    (min_top, max_rest)
}

/// True when the bounds prove the top-k position set cannot change.
pub fn check_certificate(bounds: &BoundMaps, top: &TopKSet) -> bool {
    let (min_top, max_rest) = split_extremes(bounds, top);
    min_top >= max_rest + SOUNDNESS_SLACK
}

/// True when the bounds prove the original top-k stays inside the top-`k2`.
pub fn check_relaxed_certificate(bounds: &BoundMaps, top: &TopKSet, k2: usize) -> Result<bool> {
    if k2 < top.k {
        return Err(Error::precondition(format!(
            "k2 ({k2}) must be >= k ({})",
            top.k
        )));
    }
    let mask = top.mask(bounds.lower.len());
    let mut rest: Vec<f64> = bounds
        .upper
        .data()
        .iter()
        .zip(&mask)
        .filter(|(_, &inside)| !inside)
        .map(|(&u, _)| u)
        .collect();
    let m = k2 - top.k + 1;
    if m > rest.len() {
        // every pixel is within the top-k2
        return Ok(true);
    }
    rest.sort_by(|a, b| b.total_cmp(a));
    let threshold = rest[m - 1];
    let min_top = top
        .positions
        .iter()
        .map(|&p| bounds.lower.data()[p])
        .fold(f64::INFINITY, f64::min);
    Ok(min_top >= threshold + SOUNDNESS_SLACK)
}

fn check_mode(bounds: &BoundMaps, top: &TopKSet, mode: CertMode) -> Result<bool> {
    match mode {
        CertMode::Exact => Ok(check_certificate(bounds, top)),
        CertMode::Relaxed { k2 } => check_relaxed_certificate(bounds, top, k2),
    }
}

/// Bisects `[0, 1]` for the largest radius whose bounds pass the check.
///
/// The upper end is probed first; after that each of `config.iterations`
/// steps probes the bracket midpoint. Only radii that passed are ever
/// returned.
pub fn certify_binary_search(
    net: &NetworkSpec,
    x: &Tensor,
    k: usize,
    mode: CertMode,
    config: &CertConfig,
) -> Result<CertResult> {
    let cam = compute_cam(net, x, config.class_index)?;
    let top = top_k(&cam, k)?;
    if let CertMode::Relaxed { k2 } = mode {
        if k2 < k {
            return Err(Error::precondition(format!("k2 ({k2}) must be >= k ({k})")));
        }
    }
    let (method, k2) = match mode {
        CertMode::Exact => (CertMethod::ExactTopK, None),
        CertMode::Relaxed { k2 } => (CertMethod::RelaxedTopK, Some(k2)),
    };
    let mut result = CertResult {
        radius: 0.0,
        method,
        k,
        k2,
        backend: Some(config.backend),
        class_index: cam.class_index,
        iterations: 0,
        bracket: (0.0, 1.0),
        top_k: top.clone(),
        clipped: config.clip.is_some(),
        note: None,
        classification_radius: None,
    };
    let tie_matters = match mode {
        CertMode::Exact => true,
        CertMode::Relaxed { k2 } => k2 == k,
    };
    if tie_matters && top.gap() <= 0.0 {
        result.note = Some("tie".into());
        result.bracket = (0.0, 0.0);
        return Ok(result);
    }

    let passes = |radius: f64| -> Result<bool> {
        let ball = PerturbationBall::new(x.clone(), radius, config.clip)?;
        let bounds = cam_bounds(net, &ball, cam.class_index, config.backend)?;
        check_mode(&bounds, &top, mode)
    };

    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    if passes(hi)? {
        result.radius = hi;
        result.bracket = (hi, hi);
        return Ok(result);
    }
    for _ in 0..config.iterations {
        let mid = 0.5 * (lo + hi);
        let ok = passes(mid)?;
        log::debug!("certify k={k} {mode:?}: δ={mid:e} {}", if ok { "pass" } else { "fail" });
        if ok {
            lo = mid;
        } else {
            hi = mid;
        }
        result.iterations += 1;
    }
    result.radius = lo;
    result.bracket = (lo, hi);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(lower: &[f64], upper: &[f64]) -> BoundMaps {
        let n = lower.len();
        BoundMaps {
            lower: Tensor::new(vec![1, n], lower.to_vec()).unwrap(),
            upper: Tensor::new(vec![1, n], upper.to_vec()).unwrap(),
            radius: 0.0,
            backend: Backend::Interval,
        }
    }

    fn top(positions: &[usize], values: &[f64]) -> TopKSet {
        crate::cam::top_k_of(values, positions.len()).unwrap()
    }

    #[test]
    fn zero_radius_passes_with_positive_gap() {
        let cam = [3.0, 1.0, 2.0, 0.0];
        let t = top(&[0, 2], &cam);
        assert!(check_certificate(&maps(&cam, &cam), &t));
    }

    #[test]
    fn zero_radius_tie_fails() {
        let cam = [3.0, 2.0, 2.0, 0.0];
        let t = top(&[0, 1], &cam);
        assert_eq!(t.gap(), 0.0);
        assert!(!check_certificate(&maps(&cam, &cam), &t));
    }

    #[test]
    fn hand_built_bounds() {
        // min over top-k of L is 1.0, max over the rest of U is 0.9
        let values = [2.0, 1.5, 0.5, 0.2];
        let t = top(&[0, 1], &values);
        let b = maps(&[1.2, 1.0, 0.1, 0.0], &[2.5, 2.0, 0.9, 0.4]);
        assert!(check_certificate(&b, &t));
        let b = maps(&[1.2, 1.0, 0.1, 0.0], &[2.5, 2.0, 1.0, 0.4]);
        assert!(!check_certificate(&b, &t));
    }

    #[test]
    fn relaxed_uses_mth_largest_outside_upper() {
        // k = 1 at position 0 with L = 0.5; outside upper bounds {0.7, 0.4, 0.1}
        let values = [1.0, 0.6, 0.3, 0.0];
        let t = top(&[0], &values);
        let b = maps(&[0.5, 0.0, 0.0, 0.0], &[1.5, 0.7, 0.4, 0.1]);
        assert!(check_relaxed_certificate(&b, &t, 2).unwrap());
        assert!(!check_relaxed_certificate(&b, &t, 1).unwrap());
        assert_eq!(check_relaxed_certificate(&b, &t, 1).unwrap(), check_certificate(&b, &t));
        assert!(check_relaxed_certificate(&b, &t, 0).is_err());
        // k2 covering every pixel is vacuous
        assert!(check_relaxed_certificate(&b, &t, 4).unwrap());
    }

    #[test]
    fn classification_radius_takes_min() {
        let r = CertResult {
            radius: 0.2,
            method: CertMethod::ExactTopK,
            k: 1,
            k2: None,
            backend: Some(Backend::Interval),
            class_index: 0,
            iterations: 20,
            bracket: (0.2, 0.2000001),
            top_k: top(&[0], &[1.0, 0.0]),
            clipped: true,
            note: None,
            classification_radius: None,
        };
        assert_eq!(r.clone().with_classification_radius(0.1).radius, 0.1);
        assert_eq!(r.with_classification_radius(0.5).radius, 0.2);
    }
}
