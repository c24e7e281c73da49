//! Sound elementwise bounds on network activations over an ℓ∞ ball, and the
//! CAM bounds built from them.
//!
//! Two backends are provided. [`Backend::Interval`] pushes boxes through each
//! layer. [`Backend::LinearRelax`] bounds every affine pre-activation by
//! substituting linear lower/upper forms backwards to the start of its
//! segment, relaxing unstable ReLUs between two lines. Segments are broken at
//! max-pool and global-average-pool layers, which are bounded intervally and
//! whose output box becomes the input of the next segment. Linear bounds are
//! always intersected with the interval bounds of the same neuron.
//!
//! Arithmetic uses ordinary round-to-nearest; consumers compare bounds with a
//! small slack (see [`crate::certify::SOUNDNESS_SLACK`]).

use serde::{Deserialize, Serialize};

use crate::cam::class_weights;
use crate::error::{Error, Result};
use crate::layers::{softplus, softplus_slope, Conv2d, Dense, LayerSpec};
use crate::network::NetworkSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Interval,
    LinearRelax,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Interval => "interval",
            Backend::LinearRelax => "linear",
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interval" | "ibp" => Ok(Backend::Interval),
            "linear" | "linear_relax" | "crown" => Ok(Backend::LinearRelax),
            other => Err(Error::precondition(format!("unknown backend {other:?}"))),
        }
    }
}

/// `{x' : ||x' - x||∞ <= radius}`, optionally intersected with a box `[lo, hi]^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBall {
    pub center: Tensor,
    pub radius: f64,
    pub clip: Option<(f64, f64)>,
}

/// Valid pixel range, intersected with the ball by default.
pub const UNIT_BOX: (f64, f64) = (0.0, 1.0);

impl PerturbationBall {
    pub fn new(center: Tensor, radius: f64, clip: Option<(f64, f64)>) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::precondition(format!(
                "radius must be finite and >= 0, got {radius}"
            )));
        }
        if let Some((lo, hi)) = clip {
            if !(lo <= hi) {
                return Err(Error::precondition(format!("clip range [{lo}, {hi}] is empty")));
            }
            if center.data().iter().any(|&v| v < lo || v > hi) {
                return Err(Error::precondition(format!(
                    "ball center lies outside the clip range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self {
            center,
            radius,
            clip,
        })
    }

    /// The ball as an elementwise box.
    pub fn to_box(&self) -> LayerBounds {
        let (lo, hi) = self.clip.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
        let r = self.radius;
        LayerBounds {
            lower: self.center.map(|v| (v - r).max(lo)),
            upper: self.center.map(|v| (v + r).min(hi)),
        }
    }

    /// Projects `y` into the ball (and clip box).
    pub fn project(&self, y: &mut Tensor) {
        let (lo, hi) = self.clip.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
        for (v, &c) in y.data_mut().iter_mut().zip(self.center.data()) {
            *v = v.clamp(c - self.radius, c + self.radius).clamp(lo, hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub lower: Tensor,
    pub upper: Tensor,
}

impl LayerBounds {
    pub fn point(t: &Tensor) -> Self {
        Self {
            lower: t.clone(),
            upper: t.clone(),
        }
    }

    pub fn contains(&self, t: &Tensor, slack: f64) -> bool {
        self.lower
            .data()
            .iter()
            .zip(self.upper.data())
            .zip(t.data())
            .all(|((&l, &u), &v)| l - slack <= v && v <= u + slack)
    }

    pub fn mean_width(&self) -> f64 {
        let n = self.lower.len() as f64;
        self.lower
            .data()
            .iter()
            .zip(self.upper.data())
            .map(|(l, u)| u - l)
            .sum::<f64>()
            / n
    }

    fn is_point(&self) -> bool {
        self.lower.data() == self.upper.data()
    }
}

/// `L(δ)` and `U(δ)` over the CAM pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundMaps {
    pub lower: Tensor,
    pub upper: Tensor,
    pub radius: f64,
    pub backend: Backend,
}

/// Bounds on the outputs of the first `count` layers of `net`.
pub fn bound_layers(
    net: &NetworkSpec,
    count: usize,
    ball: &PerturbationBall,
    backend: Backend,
) -> Result<Vec<LayerBounds>> {
    if ball.center.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: net.input_shape().to_vec(),
            actual: ball.center.shape().to_vec(),
        });
    }
    let input = ball.to_box();
    let backend = if input.is_point() {
        // a degenerate box makes both backends a plain forward pass
        Backend::Interval
    } else {
        backend
    };
    let mut bounds: Vec<LayerBounds> = Vec::with_capacity(count);
    let mut seg_start = 0;
    for j in 0..count {
        let layer = &net.layers()[j];
        let in_bounds = if j == 0 { &input } else { &bounds[j - 1] };
        let interval = interval_layer(layer, j, in_bounds, net.output_shape(j))?;
        let out = match (backend, layer) {
            (Backend::LinearRelax, LayerSpec::Conv2d(_) | LayerSpec::Dense(_)) if j > seg_start => {
                let seg_input = if seg_start == 0 {
                    &input
                } else {
                    &bounds[seg_start - 1]
                };
                let seg = Segment {
                    net,
                    start: seg_start,
                    input: seg_input,
                    bounds: &bounds,
                };
                let skip_dead = matches!(net.layers().get(j + 1), Some(LayerSpec::Relu));
                seg.bound_affine_output(j, &interval, skip_dead)?
            }
            _ => interval,
        };
        if matches!(
            layer,
            LayerSpec::MaxPool2d { .. } | LayerSpec::GlobalAvgPool
        ) {
            seg_start = j + 1;
        }
        bounds.push(out);
    }
    Ok(bounds)
}

/// Sound bounds on the tensor entering global average pooling (the CAM feature map).
pub fn propagate_bounds(
    net: &NetworkSpec,
    ball: &PerturbationBall,
    backend: Backend,
) -> Result<LayerBounds> {
    let layout = net.cam_layout()?;
    let mut all = bound_layers(net, layout.gap_index, ball, backend)?;
    Ok(all.pop().unwrap_or_else(|| ball.to_box()))
}

/// Combines feature-map bounds with class weights into CAM bounds.
pub fn cam_bounds_from_features(features: &LayerBounds, weights: &[f64]) -> (Tensor, Tensor) {
    let (h, w, f) = features.lower.hwc().expect("feature map is rank 3");
    assert_eq!(f, weights.len(), "one weight per filter");
    let mut lower = Vec::with_capacity(h * w);
    let mut upper = Vec::with_capacity(h * w);
    for (lo, hi) in features
        .lower
        .data()
        .chunks_exact(f)
        .zip(features.upper.data().chunks_exact(f))
    {
        let (mut l, mut u) = (0.0, 0.0);
        for k in 0..f {
            let wk = weights[k];
            if wk < 0.0 {
                l += wk * hi[k];
                u += wk * lo[k];
            } else {
                l += wk * lo[k];
                u += wk * hi[k];
            }
        }
        lower.push(l);
        upper.push(u);
    }
    (
        Tensor::new(vec![h, w], lower).expect("cam shape"),
        Tensor::new(vec![h, w], upper).expect("cam shape"),
    )
}

pub fn cam_bounds(
    net: &NetworkSpec,
    ball: &PerturbationBall,
    class_index: usize,
    backend: Backend,
) -> Result<BoundMaps> {
    let weights = class_weights(net, class_index)?;
    let (lower, upper) = match backend {
        Backend::Interval => cam_bounds_from_features(&propagate_bounds(net, ball, backend)?, &weights),
        Backend::LinearRelax => {
            // The CAM is a 1x1 convolution of the feature map with the class
            // weights. Appending it lets the back-substitution see all
            // channels of a pixel at once instead of bounding each channel
            // separately and recombining; the result is still intersected
            // with the recombined interval bounds.
            let layout = net.cam_layout()?;
            let f = weights.len();
            let mut layers = net.layers()[..layout.gap_index].to_vec();
            layers.push(LayerSpec::Conv2d(Conv2d::new(
                Tensor::new(vec![1, 1, f, 1], weights)?,
                None,
                1,
                0,
            )?));
            let augmented = NetworkSpec::new(net.input_shape().to_vec(), layers)?;
            let count = augmented.layers().len();
            let cam = bound_layers(&augmented, count, ball, backend)?.pop().expect("at least one layer");
            let (h, w) = (layout.feature_shape.0, layout.feature_shape.1);
            (cam.lower.reshape(vec![h, w])?, cam.upper.reshape(vec![h, w])?)
        }
    };
    Ok(BoundMaps {
        lower,
        upper,
        radius: ball.radius,
        backend,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub radii: Vec<f64>,
    /// Largest amount by which a bound at a larger radius was tighter than at a smaller one.
    pub max_violation: f64,
    pub violations: usize,
}

/// Verifies `L(δ') >= L(δ)` and `U(δ') <= U(δ)` for `δ' <= δ` along an ascending grid.
pub fn bounds_monotonicity_check(
    net: &NetworkSpec,
    x: &Tensor,
    class_index: usize,
    backend: Backend,
    radii: &[f64],
    clip: Option<(f64, f64)>,
) -> Result<MonotonicityReport> {
    if radii.windows(2).any(|w| w[1] < w[0]) || radii.iter().any(|&r| r < 0.0) {
        return Err(Error::precondition(
            "radius grid must be ascending and non-negative",
        ));
    }
    const TOLERANCE: f64 = 1e-12;
    let maps = radii
        .iter()
        .map(|&r| cam_bounds(net, &PerturbationBall::new(x.clone(), r, clip)?, class_index, backend))
        .collect::<Result<Vec<_>>>()?;
    let mut max_violation: f64 = 0.0;
    let mut violations = 0;
    for pair in maps.windows(2) {
        let (small, large) = (&pair[0], &pair[1]);
        for i in 0..small.lower.len() {
            let dl = large.lower.data()[i] - small.lower.data()[i];
            let du = small.upper.data()[i] - large.upper.data()[i];
            let worst = dl.max(du);
            if worst > 0.0 {
                max_violation = max_violation.max(worst);
                if worst > TOLERANCE {
                    violations += 1;
                }
            }
        }
    }
    Ok(MonotonicityReport {
        radii: radii.to_vec(),
        max_violation,
        violations,
    })
}

fn interval_layer(
    layer: &LayerSpec,
    index: usize,
    input: &LayerBounds,
    out_shape: &[usize],
) -> Result<LayerBounds> {
    Ok(match layer {
        LayerSpec::Relu => LayerBounds {
            lower: input.lower.map(|v| v.max(0.0)),
            upper: input.upper.map(|v| v.max(0.0)),
        },
        LayerSpec::Softplus { smoothing } => {
            let t = *smoothing;
            LayerBounds {
                lower: input.lower.map(|v| softplus(v, t)),
                upper: input.upper.map(|v| softplus(v, t)),
            }
        }
        LayerSpec::MaxPool2d { .. } | LayerSpec::GlobalAvgPool => LayerBounds {
            lower: layer.forward(index, &input.lower)?,
            upper: layer.forward(index, &input.upper)?,
        },
        LayerSpec::Conv2d(conv) => interval_conv(conv, input, out_shape),
        LayerSpec::Dense(dense) => interval_dense(dense, input, out_shape),
    })
}

/// Same accumulation order as the forward pass, so a point box reproduces it bitwise.
fn interval_conv(conv: &Conv2d, input: &LayerBounds, out_shape: &[usize]) -> LayerBounds {
    let (kh, kw, cin, cout) = conv.dims();
    let (h, w, _) = input.lower.hwc().expect("conv input is rank 3");
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let (xl, xu) = (input.lower.data(), input.upper.data());
    let k = conv.kernel.data();
    let mut lo = vec![0.0; oh * ow * cout];
    let mut hi = vec![0.0; oh * ow * cout];
    for r in 0..oh {
        for c in 0..ow {
            let base = (r * ow + c) * cout;
            for co in 0..cout {
                lo[base + co] = conv.bias_at(co);
                hi[base + co] = conv.bias_at(co);
            }
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
                    let p = (ir as usize * w + ic as usize) * cin;
                    let taps = &k[(dy * kw + dx) * cin * cout..][..cin * cout];
                    for ci in 0..cin {
                        let (vl, vu) = (xl[p + ci], xu[p + ci]);
                        let row = &taps[ci * cout..(ci + 1) * cout];
                        let acc_l = &mut lo[base..base + cout];
                        for (a, &wt) in acc_l.iter_mut().zip(row) {
                            *a += if wt >= 0.0 { vl * wt } else { vu * wt };
                        }
                        let acc_u = &mut hi[base..base + cout];
                        for (a, &wt) in acc_u.iter_mut().zip(row) {
                            *a += if wt >= 0.0 { vu * wt } else { vl * wt };
                        }
                    }
                }
            }
        }
    }
    LayerBounds {
        lower: Tensor::new(out_shape.to_vec(), lo).expect("conv bound shape"),
        upper: Tensor::new(out_shape.to_vec(), hi).expect("conv bound shape"),
    }
}

fn interval_dense(dense: &Dense, input: &LayerBounds, out_shape: &[usize]) -> LayerBounds {
    let no = dense.outputs();
    let w = dense.kernel.data();
    let mut lo: Vec<f64> = (0..no).map(|o| dense.bias_at(o)).collect();
    let mut hi = lo.clone();
    for (i, (&vl, &vu)) in input.lower.data().iter().zip(input.upper.data()).enumerate() {
        let row = &w[i * no..(i + 1) * no];
        for o in 0..no {
            let wt = row[o];
            if wt >= 0.0 {
                lo[o] += vl * wt;
                hi[o] += vu * wt;
            } else {
                lo[o] += vu * wt;
                hi[o] += vl * wt;
            }
        }
    }
    LayerBounds {
        lower: Tensor::new(out_shape.to_vec(), lo).expect("dense bound shape"),
        upper: Tensor::new(out_shape.to_vec(), hi).expect("dense bound shape"),
    }
}

/// Per-element linear envelopes `slope * z + intercept` of an activation over its input bounds.
struct Relaxation {
    upper_slope: Vec<f64>,
    upper_icpt: Vec<f64>,
    lower_slope: Vec<f64>,
    lower_icpt: Vec<f64>,
}

impl Relaxation {
    fn new(layer: &LayerSpec, pre: &LayerBounds) -> Self {
        let n = pre.lower.len();
        let mut r = Relaxation {
            upper_slope: Vec::with_capacity(n),
            upper_icpt: Vec::with_capacity(n),
            lower_slope: Vec::with_capacity(n),
            lower_icpt: Vec::with_capacity(n),
        };
        for (&l, &u) in pre.lower.data().iter().zip(pre.upper.data()) {
            let (us, ui, ls, li) = match layer {
                LayerSpec::Relu => relu_envelope(l, u),
                LayerSpec::Softplus { smoothing } => softplus_envelope(l, u, *smoothing),
                _ => unreachable!("only activations are relaxed"),
            };
            r.upper_slope.push(us);
            r.upper_icpt.push(ui);
            r.lower_slope.push(ls);
            r.lower_icpt.push(li);
        }
        r
    }
}

/// `(upper slope, upper intercept, lower slope, lower intercept)`.
fn relu_envelope(l: f64, u: f64) -> (f64, f64, f64, f64) {
    if u <= 0.0 {
        (0.0, 0.0, 0.0, 0.0)
    } else if l >= 0.0 {
        (1.0, 0.0, 1.0, 0.0)
    } else {
        let slope = u / (u - l);
        let lower = if -l >= u { 0.0 } else { 1.0 };
        (slope, -slope * l, lower, 0.0)
    }
}

/// Chord above, tangent at the midpoint below (softplus is convex).
fn softplus_envelope(l: f64, u: f64, t: f64) -> (f64, f64, f64, f64) {
    let m = 0.5 * (l + u);
    let ts = softplus_slope(m, t);
    let ti = softplus(m, t) - ts * m;
    if u - l <= 1e-12 * (1.0 + l.abs()) {
        // the chord is ill-conditioned; a tangent raised by the curvature
        // over a near-point interval is still an upper line
        let bump = (u - l) * (u - l) * t;
        return (ts, ti + bump + f64::EPSILON * (1.0 + softplus(u, t)), ts, ti);
    }
    let (fl, fu) = (softplus(l, t), softplus(u, t));
    let cs = (fu - fl) / (u - l);
    (cs, fl - cs * l, ts, ti)
}

/// Linear coefficients over a rectangular spatial window of one layer's
/// output. Every `(pixel, channel)` entry holds `rhs` coefficients, one per
/// bound being computed, so many bounds share one backward sweep.
#[derive(Debug, Clone)]
struct Window {
    r0: usize,
    c0: usize,
    nr: usize,
    nc: usize,
    ch: usize,
    rhs: usize,
    data: Vec<f64>,
}

impl Window {
    /// `(window entry, tensor entry)` channel-0 offsets, one per window pixel.
    fn pixel_offsets(&self, w: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.nr).flat_map(move |i| {
            (0..self.nc).map(move |j| {
                (
                    (i * self.nc + j) * self.ch,
                    ((self.r0 + i) * w + self.c0 + j) * self.ch,
                )
            })
        })
    }
}

fn hwc_of(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [h, w, c] => (h, w, c),
        [n] => (1, 1, n),
        _ => unreachable!("activations are rank 1 or 3"),
    }
}

struct Segment<'a> {
    net: &'a NetworkSpec,
    start: usize,
    input: &'a LayerBounds,
    bounds: &'a [LayerBounds],
}

impl Segment<'_> {
    fn pre_bounds(&self, layer: usize) -> &LayerBounds {
        if layer == self.start {
            self.input
        } else {
            &self.bounds[layer - 1]
        }
    }

    /// Linear bounds on every output of affine layer `target`, intersected
    /// with `interval`. With `skip_dead`, outputs whose interval upper bound is
    /// already `<= 0` keep their interval bounds (a following ReLU zeroes them
    /// either way).
    fn bound_affine_output(&self, target: usize, interval: &LayerBounds, skip_dead: bool) -> Result<LayerBounds> {
        let relaxations: Vec<Option<Relaxation>> = (self.start..target)
            .map(|j| {
                let layer = &self.net.layers()[j];
                layer
                    .is_activation()
                    .then(|| Relaxation::new(layer, self.pre_bounds(j)))
            })
            .collect();
        let (h, w, c) = hwc_of(self.net.output_shape(target));
        let mut out = interval.clone();
        let mut channels = Vec::with_capacity(c);
        for pix in 0..h * w {
            channels.clear();
            channels.extend((0..c).filter(|&k| !(skip_dead && interval.upper.data()[pix * c + k] <= 0.0)));
            if channels.is_empty() {
                continue;
            }
            // even columns carry upper bounds, odd columns lower bounds
            let rhs = 2 * channels.len();
            let mut data = vec![0.0; c * rhs];
            for (q, &k) in channels.iter().enumerate() {
                data[k * rhs + 2 * q] = 1.0;
                data[k * rhs + 2 * q + 1] = 1.0;
            }
            let start = Window {
                r0: pix / w,
                c0: pix % w,
                nr: 1,
                nc: 1,
                ch: c,
                rhs,
                data,
            };
            let values = self.substitute(target, start, &relaxations);
            for (q, &k) in channels.iter().enumerate() {
                let i = pix * c + k;
                let l = values[2 * q + 1].max(interval.lower.data()[i]);
                let u = values[2 * q].min(interval.upper.data()[i]);
                // only rounding can cross the two; keep the wider ordering
                let (l, u) = if l <= u { (l, u) } else { (u, l) };
                out.lower.data_mut()[i] = l;
                out.upper.data_mut()[i] = u;
            }
        }
        Ok(out)
    }

    /// Pushes `coeffs` (over the output of `target`) back to the segment input
    /// and concretizes each column; even columns are upper bounds.
    fn substitute(&self, target: usize, mut coeffs: Window, relaxations: &[Option<Relaxation>]) -> Vec<f64> {
        let rhs = coeffs.rhs;
        let mut constant = vec![0.0; rhs];
        for j in (self.start..=target).rev() {
            let layer = &self.net.layers()[j];
            let in_shape = hwc_of(self.net.input_shape_of(j));
            match layer {
                LayerSpec::Conv2d(conv) => {
                    coeffs = conv_transpose(conv, in_shape, &coeffs, &mut constant);
                }
                LayerSpec::Dense(dense) => {
                    coeffs = dense_transpose(dense, in_shape, &coeffs, &mut constant);
                }
                LayerSpec::Relu | LayerSpec::Softplus { .. } => {
                    let relax = relaxations[j - self.start]
                        .as_ref()
                        .expect("activation relaxation precomputed");
                    let w = in_shape.1;
                    let ch = coeffs.ch;
                    for (wo, to) in coeffs.pixel_offsets(w).collect::<Vec<_>>() {
                        for k in 0..ch {
                            let t = to + k;
                            let (us, ui) = (relax.upper_slope[t], relax.upper_icpt[t]);
                            let (ls, li) = (relax.lower_slope[t], relax.lower_icpt[t]);
                            let col = &mut coeffs.data[(wo + k) * rhs..][..rhs];
                            for (r, c) in col.iter_mut().enumerate() {
                                let v = *c;
                                if v == 0.0 {
                                    continue;
                                }
                                let (s, b) = if (v > 0.0) == (r % 2 == 0) { (us, ui) } else { (ls, li) };
                                constant[r] += v * b;
                                *c = v * s;
                            }
                        }
                    }
                }
                LayerSpec::MaxPool2d { .. } | LayerSpec::GlobalAvgPool => {
                    unreachable!("segments end before pooling layers")
                }
            }
        }
        let (_, w, _) = hwc_of(self.net.input_shape_of(self.start));
        let (lo, hi) = (self.input.lower.data(), self.input.upper.data());
        let mut total = constant;
        for (wo, to) in coeffs.pixel_offsets(w) {
            for k in 0..coeffs.ch {
                let (l, h) = (lo[to + k], hi[to + k]);
                let col = &coeffs.data[(wo + k) * rhs..][..rhs];
                for (r, &c) in col.iter().enumerate() {
                    total[r] += if (c >= 0.0) == (r % 2 == 0) { c * h } else { c * l };
                }
            }
        }
        total
    }
}

fn conv_transpose(conv: &Conv2d, in_shape: (usize, usize, usize), win: &Window, constant: &mut [f64]) -> Window {
    let (kh, kw, cin, cout) = conv.dims();
    let (h, w, _) = in_shape;
    let rhs = win.rhs;
    let (s, p) = (conv.stride as isize, conv.padding as isize);
    let row_lo = (win.r0 as isize * s - p).max(0) as usize;
    let row_hi = (((win.r0 + win.nr - 1) as isize) * s - p + kh as isize - 1).min(h as isize - 1) as usize;
    let col_lo = (win.c0 as isize * s - p).max(0) as usize;
    let col_hi = (((win.c0 + win.nc - 1) as isize) * s - p + kw as isize - 1).min(w as isize - 1) as usize;
    let (nr, nc) = (row_hi + 1 - row_lo, col_hi + 1 - col_lo);
    let mut data = vec![0.0; nr * nc * cin * rhs];
    let k = conv.kernel.data();
    for i in 0..win.nr {
        for j in 0..win.nc {
            let src = &win.data[(i * win.nc + j) * cout * rhs..][..cout * rhs];
            if src.iter().all(|&v| v == 0.0) {
                continue;
            }
            for co in 0..cout {
                let b = conv.bias_at(co);
                for (acc, &l) in constant.iter_mut().zip(&src[co * rhs..(co + 1) * rhs]) {
                    *acc += l * b;
                }
            }
            let (r, c) = ((win.r0 + i) as isize, (win.c0 + j) as isize);
            for dy in 0..kh {
                let ir = r * s - p + dy as isize;
                if ir < 0 || ir >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ic = c * s - p + dx as isize;
                    if ic < 0 || ic >= w as isize {
                        continue;
                    }
                    let dst = ((ir as usize - row_lo) * nc + (ic as usize - col_lo)) * cin * rhs;
                    let taps = &k[(dy * kw + dx) * cin * cout..][..cin * cout];
                    for ci in 0..cin {
                        let out = &mut data[dst + ci * rhs..][..rhs];
                        for co in 0..cout {
                            let wt = taps[ci * cout + co];
                            if wt == 0.0 {
                                continue;
                            }
                            for (o, &l) in out.iter_mut().zip(&src[co * rhs..(co + 1) * rhs]) {
                                *o += wt * l;
                            }
                        }
                    }
                }
            }
        }
    }
    Window {
        r0: row_lo,
        c0: col_lo,
        nr,
        nc,
        ch: cin,
        rhs,
        data,
    }
}

fn dense_transpose(dense: &Dense, in_shape: (usize, usize, usize), win: &Window, constant: &mut [f64]) -> Window {
    // dense outputs are rank 1, so the window always spans every output
    let (no, rhs) = (dense.outputs(), win.rhs);
    debug_assert_eq!(win.data.len(), no * rhs);
    for o in 0..no {
        let b = dense.bias_at(o);
        for (acc, &l) in constant.iter_mut().zip(&win.data[o * rhs..(o + 1) * rhs]) {
            *acc += l * b;
        }
    }
    let w = dense.kernel.data();
    let mut data = vec![0.0; dense.inputs() * rhs];
    for (i, out) in data.chunks_exact_mut(rhs).enumerate() {
        for o in 0..no {
            let wt = w[i * no + o];
            for (d, &l) in out.iter_mut().zip(&win.data[o * rhs..(o + 1) * rhs]) {
                *d += wt * l;
            }
        }
    }
    let (h, wd, c) = in_shape;
    Window {
        r0: 0,
        c0: 0,
        nr: h,
        nc: wd,
        ch: c,
        rhs,
        data,
    }
}
