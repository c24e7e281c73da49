//! Lipschitz-based top-k certificate.
//!
//! For each top-k pixel `σ_i` and each pixel `p` outside the set, the margin
//! `g(x) = I(x)_σi - I(x)_p` can only reach zero once the input moves by
//! `g(x) / L`, where `L` bounds how fast `g` changes per unit of ℓ∞ input
//! distance. The certified radius is the smallest such ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{cam_for_class, class_weights, compute_cam, top_k};
use crate::certify::{CertMethod, CertResult};
use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::network::NetworkSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Certified upper bound from layer-wise operator norms.
    NormProduct,
    /// Empirical lower bound from random perturbations; diagnostic only.
    Sampled { samples: usize, seed: u64 },
}

/// A `(top-k position, outside position)` pair.
pub type PixelPair = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub pairs: Vec<PixelPair>,
    pub constants: Vec<f64>,
    pub estimator: Estimator,
}

pub const DEFAULT_REGION_RADIUS: f64 = 1.0;

/// `max_o sum_i |W[o, i]|` over the rows of an affine layer.
fn operator_norm(layer: &LayerSpec) -> f64 {
    match layer {
        LayerSpec::Conv2d(conv) => {
            let (kh, kw, cin, cout) = conv.dims();
            let k = conv.kernel.data();
            (0..cout)
                .map(|co| {
                    (0..kh * kw * cin)
                        .map(|tap| k[tap * cout + co].abs())
                        .sum::<f64>()
                })
                .fold(0.0, f64::max)
        }
        LayerSpec::Dense(d) => (0..d.outputs())
            .map(|o| (0..d.inputs()).map(|i| d.weight(i, o).abs()).sum::<f64>())
            .fold(0.0, f64::max),
        // ReLU, softplus (slope in (0, 1)), max-pool and averaging are 1-Lipschitz in ℓ∞
        _ => 1.0,
    }
}

/// Per-neuron sensitivity of the CAM feature map: `sens[n]` bounds
/// `|f_n(x) - f_n(y)| / ||x - y||∞`.
///
/// The last affine layer contributes its exact row norms when only
/// elementwise activations follow it; all earlier layers contribute their
/// induced ℓ∞ operator norm.
fn feature_sensitivity(net: &NetworkSpec) -> Result<Vec<f64>> {
    let layout = net.cam_layout()?;
    let layers = &net.layers()[..layout.gap_index];
    let n_features = {
        let (h, w, f) = layout.feature_shape;
        h * w * f
    };
    let last_affine = layers.iter().rposition(LayerSpec::is_affine);
    let Some(la) = last_affine else {
        return Ok(vec![1.0; n_features]);
    };
    let tail_elementwise = layers[la + 1..].iter().all(LayerSpec::is_activation);
    if !tail_elementwise {
        let product: f64 = layers.iter().map(operator_norm).product();
        return Ok(vec![product; n_features]);
    }
    let prefix: f64 = layers[..la].iter().map(operator_norm).product();
    let rows: Vec<f64> = match &layers[la] {
        LayerSpec::Conv2d(conv) => {
            let (kh, kw, cin, cout) = conv.dims();
            let in_shape = net.input_shape_of(la);
            let (h, w) = (in_shape[0], in_shape[1]);
            let out = net.output_shape(la);
            let (oh, ow) = (out[0], out[1]);
            let k = conv.kernel.data();
            let mut rows = Vec::with_capacity(oh * ow * cout);
            for r in 0..oh {
                for c in 0..ow {
                    for co in 0..cout {
                        let mut s = 0.0;
                        for dy in 0..kh {
                            let ir = (r * conv.stride + dy) as isize - conv.padding as isize;
                            if ir < 0 || ir >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ic = (c * conv.stride + dx) as isize - conv.padding as isize;
                                if ic < 0 || ic >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    s += k[((dy * kw + dx) * cin + ci) * cout + co].abs();
                                }
                            }
                        }
                        rows.push(s);
                    }
                }
            }
            rows
        }
        LayerSpec::Dense(d) => (0..d.outputs())
            .map(|o| (0..d.inputs()).map(|i| d.weight(i, o).abs()).sum())
            .collect(),
        _ => unreachable!("rposition found an affine layer"),
    };
    Ok(rows.into_iter().map(|r| r * prefix).collect())
}

/// Lipschitz constants of `g = I_a - I_b` for each pair, for the CAM of `class_index`.
pub fn estimate_lipschitz(
    net: &NetworkSpec,
    x: &Tensor,
    class_index: usize,
    pairs: &[PixelPair],
    region_radius: f64,
    estimator: Estimator,
) -> Result<LipschitzEstimate> {
    if pairs.is_empty() {
        return Err(Error::precondition("at least one pixel pair is required"));
    }
    let weights = class_weights(net, class_index)?;
    let f = weights.len();
    let constants = match estimator {
        Estimator::NormProduct => {
            let sens = feature_sensitivity(net)?;
            let pixel_term = |p: usize| -> f64 {
                (0..f).map(|k| weights[k].abs() * sens[p * f + k]).sum()
            };
            pairs
                .iter()
                .map(|&(a, b)| {
                    if a == b {
                        0.0
                    } else {
                        pixel_term(a) + pixel_term(b)
                    }
                })
                .collect()
        }
        Estimator::Sampled { samples, seed } => {
            let base = cam_for_class(net, x, class_index)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut best = vec![0.0_f64; pairs.len()];
            for _ in 0..samples {
                let mut y = x.clone();
                let mut norm = 0.0_f64;
                for v in y.data_mut() {
                    let e = rng.gen_range(-region_radius..=region_radius);
                    *v += e;
                    norm = norm.max(e.abs());
                }
                if norm == 0.0 {
                    continue;
                }
                let cam = cam_for_class(net, &y, class_index)?;
                for (slot, &(a, b)) in best.iter_mut().zip(pairs) {
                    let g0 = base.data()[a] - base.data()[b];
                    let g1 = cam.data()[a] - cam.data()[b];
                    *slot = slot.max((g1 - g0).abs() / norm);
                }
            }
            best
        }
    };
    Ok(LipschitzEstimate {
        pairs: pairs.to_vec(),
        constants,
        estimator,
    })
}

/// Certified radius `min g / L` over all (top-k, outside) pairs, capped at
/// `region_radius` so the radius never exceeds the region the constants
/// were taken over.
pub fn lipschitz_certify(
    net: &NetworkSpec,
    x: &Tensor,
    k: usize,
    region_radius: f64,
    class_index: Option<usize>,
) -> Result<CertResult> {
    if !(region_radius > 0.0) {
        return Err(Error::precondition(format!(
            "region radius must be positive, got {region_radius}"
        )));
    }
    let cam = compute_cam(net, x, class_index)?;
    let top = top_k(&cam, k)?;
    let mut result = CertResult {
        radius: 0.0,
        method: CertMethod::Lipschitz,
        k,
        k2: None,
        backend: None,
        class_index: cam.class_index,
        iterations: 0,
        bracket: (0.0, region_radius),
        top_k: top.clone(),
        clipped: false,
        note: None,
        classification_radius: None,
    };
    if top.gap() <= 0.0 {
        result.note = Some("tie".into());
        return Ok(result);
    }
    let mask = top.mask(cam.len());
    let pairs: Vec<PixelPair> = top
        .positions
        .iter()
        .flat_map(|&a| {
            mask.iter()
                .enumerate()
                .filter(|(_, &inside)| !inside)
                .map(move |(b, _)| (a, b))
        })
        .collect();
    let est = estimate_lipschitz(net, x, cam.class_index, &pairs, region_radius, Estimator::NormProduct)?;
    let values = cam.values.data();
    let mut radius = f64::INFINITY;
    for (&(a, b), &l) in pairs.iter().zip(&est.constants) {
        if l <= 0.0 {
            // g is constant, the pair can never swap
            continue;
        }
        let g = values[a] - values[b];
        radius = radius.min(g.max(0.0) / l);
    }
    result.radius = radius.min(region_radius);
    result.bracket = (result.radius, region_radius);
    Ok(result)
}
