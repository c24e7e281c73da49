//! The five layer kinds a CAM network is built from, with forward and
//! reverse-mode passes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing used when a ReLU network is turned into its softplus surrogate.
pub const DEFAULT_SOFTPLUS_SMOOTHING: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[kh, kw, cin, cout]`
    pub kernel: Tensor,
    /// `[cout]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(kernel: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let conv = Self {
            kernel,
            bias,
            stride,
            padding,
        };
        conv.validate(0)?;
        Ok(conv)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.kernel.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn validate(&self, layer: usize) -> Result<()> {
        let invalid = |message: String| Error::InvalidLayer { layer, message };
        if self.kernel.rank() != 4 {
            return Err(invalid(format!(
                "conv kernel must be rank 4, got shape {:?}",
                self.kernel.shape()
            )));
        }
        if self.stride == 0 {
            return Err(invalid("conv stride must be >= 1".into()));
        }
        let (kh, kw, _, cout) = self.dims();
        if self.padding >= kh || self.padding >= kw {
            return Err(invalid(format!(
                "conv padding {} must be smaller than the kernel {kh}x{kw}",
                self.padding
            )));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [cout] {
                return Err(invalid(format!(
                    "conv bias must have shape [{cout}], got {:?}",
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bias_at(&self, cout: usize) -> f64 {
        self.bias.as_ref().map_or(0.0, |b| b.data()[cout])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw, _, _) = self.dims();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < kh || wp < kw {
            return None;
        }
        Some(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[in, out]`
    pub kernel: Tensor,
    /// `[out]`
    pub bias: Option<Tensor>,
}

impl Dense {
    pub fn new(kernel: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let dense = Self { kernel, bias };
        dense.validate(0)?;
        Ok(dense)
    }

    pub fn inputs(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn weight(&self, input: usize, output: usize) -> f64 {
        self.kernel.data()[input * self.outputs() + output]
    }

    pub fn bias_at(&self, output: usize) -> f64 {
        self.bias.as_ref().map_or(0.0, |b| b.data()[output])
    }

    fn validate(&self, layer: usize) -> Result<()> {
        let invalid = |message: String| Error::InvalidLayer { layer, message };
        if self.kernel.rank() != 2 {
            return Err(invalid(format!(
                "dense kernel must be rank 2, got shape {:?}",
                self.kernel.shape()
            )));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [self.outputs()] {
                return Err(invalid(format!(
                    "dense bias must have shape [{}], got {:?}",
                    self.outputs(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d(Conv2d),
    Relu,
    Softplus { smoothing: f64 },
    MaxPool2d { window: usize, stride: usize },
    GlobalAvgPool,
    Dense(Dense),
}

/// `(1/t) ln(1 + e^{t v})` without overflow for large `|t v|`.
pub fn softplus(v: f64, t: f64) -> f64 {
    let z = t * v;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / t
}

/// Derivative of [`softplus`], the logistic function of `t v`.
pub fn softplus_slope(v: f64, t: f64) -> f64 {
    let z = t * v;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "Conv2D",
            LayerSpec::Relu => "ReLU",
            LayerSpec::Softplus { .. } => "Softplus",
            LayerSpec::MaxPool2d { .. } => "MaxPool2D",
            LayerSpec::GlobalAvgPool => "GlobalAvgPool",
            LayerSpec::Dense(_) => "Dense",
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, LayerSpec::Conv2d(_) | LayerSpec::Dense(_))
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, LayerSpec::Relu | LayerSpec::Softplus { .. })
    }

    /// Checks the layer's own parameters.
    pub fn validate(&self, layer: usize) -> Result<()> {
        match self {
            LayerSpec::Conv2d(c) => c.validate(layer),
            LayerSpec::Dense(d) => d.validate(layer),
            LayerSpec::Softplus { smoothing } => {
                if !(smoothing.is_finite() && *smoothing > 0.0) {
                    return Err(Error::InvalidLayer {
                        layer,
                        message: format!("softplus smoothing must be positive, got {smoothing}"),
                    });
                }
                Ok(())
            }
            LayerSpec::MaxPool2d { window, stride } => {
                if *window == 0 || *stride == 0 {
                    return Err(Error::InvalidLayer {
                        layer,
                        message: "max-pool window and stride must be >= 1".into(),
                    });
                }
                Ok(())
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool => Ok(()),
        }
    }

    /// Shape produced from `input`, or a shape error naming `layer`.
    pub fn output_shape(&self, layer: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            layer,
            expected,
            actual: input.to_vec(),
        };
        match self {
            LayerSpec::Relu | LayerSpec::Softplus { .. } => Ok(input.to_vec()),
            LayerSpec::Conv2d(conv) => {
                let (kh, kw, cin, cout) = conv.dims();
                let &[h, w, c] = input else {
                    return Err(mismatch(vec![kh, kw, cin]));
                };
                if c != cin {
                    return Err(mismatch(vec![h, w, cin]));
                }
                let (oh, ow) = conv
                    .output_hw(h, w)
                    .ok_or_else(|| mismatch(vec![kh.saturating_sub(2 * conv.padding), kw, cin]))?;
                Ok(vec![oh, ow, cout])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let &[h, w, c] = input else {
                    return Err(mismatch(vec![*window, *window, 1]));
                };
                if h < *window || w < *window {
                    return Err(mismatch(vec![*window, *window, c]));
                }
                Ok(vec![(h - window) / stride + 1, (w - window) / stride + 1, c])
            }
            LayerSpec::GlobalAvgPool => {
                let &[_, _, c] = input else {
                    return Err(mismatch(vec![1, 1, 1]));
                };
                Ok(vec![c])
            }
            LayerSpec::Dense(d) => {
                let n: usize = input.iter().product();
                if n != d.inputs() {
                    return Err(mismatch(vec![d.inputs()]));
                }
                Ok(vec![d.outputs()])
            }
        }
    }

    pub fn forward(&self, layer: usize, input: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(layer, input.shape())?;
        let out = match self {
            LayerSpec::Relu => input.map(|v| v.max(0.0)),
            LayerSpec::Softplus { smoothing } => {
                let t = *smoothing;
                input.map(|v| softplus(v, t))
            }
            LayerSpec::Conv2d(conv) => conv_forward(conv, input, &out_shape),
            LayerSpec::MaxPool2d { window, stride } => {
                maxpool_forward(*window, *stride, input, &out_shape).0
            }
            LayerSpec::GlobalAvgPool => {
                let (h, w, c) = input.hwc().expect("checked by output_shape");
                let mut sums = vec![0.0; c];
                for px in input.data().chunks_exact(c) {
                    for (s, v) in sums.iter_mut().zip(px) {
                        *s += v;
                    }
                }
                let n = (h * w) as f64;
                Tensor::new(out_shape, sums.into_iter().map(|s| s / n).collect())?
            }
            LayerSpec::Dense(d) => {
                let (ni, no) = (d.inputs(), d.outputs());
                let mut out: Vec<f64> = (0..no).map(|o| d.bias_at(o)).collect();
                let w = d.kernel.data();
                for (i, &x) in input.data().iter().enumerate().take(ni) {
                    if x == 0.0 {
                        continue;
                    }
                    for (o, acc) in out.iter_mut().enumerate() {
                        *acc += x * w[i * no + o];
                    }
                }
                Tensor::new(out_shape, out)?
            }
        };
        Ok(out)
    }

    /// Pulls `out_cotangent` (shaped like this layer's output) back to the input.
    pub fn backward(&self, layer: usize, input: &Tensor, out_cotangent: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(layer, input.shape())?;
        if out_cotangent.shape() != out_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                layer,
                expected: out_shape,
                actual: out_cotangent.shape().to_vec(),
            });
        }
        let grad = match self {
            LayerSpec::Relu => input.zip_map(out_cotangent, |v, g| if v > 0.0 { g } else { 0.0 })?,
            LayerSpec::Softplus { smoothing } => {
                let t = *smoothing;
                input.zip_map(out_cotangent, |v, g| g * softplus_slope(v, t))?
            }
            LayerSpec::Conv2d(conv) => conv_backward(conv, input.shape(), out_cotangent),
            LayerSpec::MaxPool2d { window, stride } => {
                let (_, argmax) = maxpool_forward(*window, *stride, input, &out_shape);
                let mut grad = Tensor::zeros(input.shape().to_vec());
                let g = grad.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += out_cotangent.data()[o];
                }
                grad
            }
            LayerSpec::GlobalAvgPool => {
                let (h, w, c) = input.hwc().expect("checked by output_shape");
                let n = (h * w) as f64;
                let mut grad = Tensor::zeros(input.shape().to_vec());
                for px in grad.data_mut().chunks_exact_mut(c) {
                    for (g, &cot) in px.iter_mut().zip(out_cotangent.data()) {
                        *g = cot / n;
                    }
                }
                grad
            }
            LayerSpec::Dense(d) => {
                let no = d.outputs();
                let w = d.kernel.data();
                let cot = out_cotangent.data();
                let data = (0..d.inputs())
                    .map(|i| {
                        w[i * no..(i + 1) * no]
                            .iter()
                            .zip(cot)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                Tensor::new(input.shape().to_vec(), data)?
            }
        };
        Ok(grad)
    }
}

fn conv_forward(conv: &Conv2d, input: &Tensor, out_shape: &[usize]) -> Tensor {
    let (kh, kw, cin, cout) = conv.dims();
    let (h, w, _) = input.hwc().expect("conv input is rank 3");
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let x = input.data();
    let k = conv.kernel.data();
    let mut out = vec![0.0; oh * ow * cout];
    let bias: Vec<f64> = (0..cout).map(|c| conv.bias_at(c)).collect();
    for r in 0..oh {
        for c in 0..ow {
            let acc = &mut out[(r * ow + c) * cout..(r * ow + c + 1) * cout];
            acc.copy_from_slice(&bias);
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
                    let px = &x[(ir as usize * w + ic as usize) * cin..][..cin];
                    let taps = &k[(dy * kw + dx) * cin * cout..][..cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for (a, &wt) in acc.iter_mut().zip(&taps[ci * cout..(ci + 1) * cout]) {
                            *a += v * wt;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

fn conv_backward(conv: &Conv2d, in_shape: &[usize], cot: &Tensor) -> Tensor {
    let (kh, kw, cin, cout) = conv.dims();
    let (h, w) = (in_shape[0], in_shape[1]);
    let (oh, ow) = (cot.shape()[0], cot.shape()[1]);
    let k = conv.kernel.data();
    let g = cot.data();
    let mut grad = vec![0.0; h * w * cin];
    for r in 0..oh {
        for c in 0..ow {
            let go = &g[(r * ow + c) * cout..][..cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
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
                    let gi = &mut grad[(ir as usize * w + ic as usize) * cin..][..cin];
                    let taps = &k[(dy * kw + dx) * cin * cout..][..cin * cout];
                    for (ci, acc) in gi.iter_mut().enumerate() {
                        *acc += taps[ci * cout..(ci + 1) * cout]
                            .iter()
                            .zip(go)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), grad).expect("conv grad shape")
}

/// Returns pooled values and, per output element, the flat input index that
/// produced it (lowest index on ties).
fn maxpool_forward(window: usize, stride: usize, input: &Tensor, out_shape: &[usize]) -> (Tensor, Vec<usize>) {
    let (_, w, ch) = input.hwc().expect("pool input is rank 3");
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * ch);
    let mut argmax = Vec::with_capacity(oh * ow * ch);
    for r in 0..oh {
        for c in 0..ow {
            for k in 0..ch {
                let mut best = (r * stride * w + c * stride) * ch + k;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ((r * stride + dy) * w + c * stride + dx) * ch + k;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (
        Tensor::new(out_shape.to_vec(), out).expect("pool output shape"),
        argmax,
    )
}
