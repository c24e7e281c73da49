//! Sequential networks and their CAM layout.

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// Output shape of every layer, `shapes[i]` for `layers[i]`.
    shapes: Vec<Vec<usize>>,
}

/// Where the CAM lives in a network: the feature map entering global average
/// pooling and the dense layer that weights it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CamLayout {
    pub gap_index: usize,
    pub dense_index: usize,
    /// `(s_h, s_w, filters)` of the tensor entering global average pooling.
    pub feature_shape: (usize, usize, usize),
    pub class_count: usize,
}

impl NetworkSpec {
    /// Builds a network, checking every layer and that consecutive shapes chain.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "input shape {input_shape:?} must have dimensions >= 1"
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate(i)?;
            shape = layer.output_shape(i, &shape)?;
            shapes.push(shape.clone());
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    /// Builds a network and additionally requires the CAM tail.
    pub fn cam(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let net = Self::new(input_shape, layers)?;
        net.cam_layout()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    /// Shape of the tensor fed into `layer`.
    pub fn input_shape_of(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_shape
        } else {
            &self.shapes[layer - 1]
        }
    }

    pub fn class_count(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Locates the GAP + Dense tail required for CAM.
    pub fn cam_layout(&self) -> Result<CamLayout> {
        let n = self.layers.len();
        if n < 2 {
            return Err(Error::NotCamCompatible(
                "network needs at least GlobalAvgPool followed by Dense".into(),
            ));
        }
        let (gap_index, dense_index) = (n - 2, n - 1);
        if !matches!(self.layers[gap_index], LayerSpec::GlobalAvgPool) {
            return Err(Error::NotCamCompatible(format!(
                "layer {gap_index} is {}, expected GlobalAvgPool",
                self.layers[gap_index].name()
            )));
        }
        let LayerSpec::Dense(dense) = &self.layers[dense_index] else {
            return Err(Error::NotCamCompatible(format!(
                "layer {dense_index} is {}, expected Dense",
                self.layers[dense_index].name()
            )));
        };
        if let Some(i) = self.layers[..gap_index]
            .iter()
            .position(|l| matches!(l, LayerSpec::Dense(_) | LayerSpec::GlobalAvgPool))
        {
            return Err(Error::NotCamCompatible(format!(
                "layer {i} ({}) precedes the GlobalAvgPool + Dense tail",
                self.layers[i].name()
            )));
        }
        let &[sh, sw, f] = self.input_shape_of(gap_index) else {
            return Err(Error::NotCamCompatible(
                "global average pooling input must be a spatial feature map".into(),
            ));
        };
        if f != dense.inputs() {
            return Err(Error::NotCamCompatible(format!(
                "dense layer expects {} inputs but the feature map has {f} filters",
                dense.inputs()
            )));
        }
        Ok(CamLayout {
            gap_index,
            dense_index,
            feature_shape: (sh, sw, f),
            class_count: dense.outputs(),
        })
    }

    /// Layers that produce the CAM feature map (everything before GAP).
    pub fn feature_layers(&self) -> Result<&[LayerSpec]> {
        let layout = self.cam_layout()?;
        Ok(&self.layers[..layout.gap_index])
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Input followed by the output of every layer (`layers.len() + 1` tensors).
    pub fn forward_network(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.forward_prefix(x, self.layers.len())
    }

    /// Input followed by the outputs of the first `count` layers.
    pub fn forward_prefix(&self, x: &Tensor, count: usize) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(count + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers[..count].iter().enumerate() {
            let next = layer.forward(i, &acts[i])?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Final network output.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        self.check_input(x)?;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(i, &cur)?;
        }
        Ok(cur)
    }

    /// Gradient of `<output, cotangent>` with respect to the input.
    pub fn backward_network(&self, x: &Tensor, output_cotangent: &Tensor) -> Result<Tensor> {
        let acts = self.forward_network(x)?;
        self.pullback(&acts, self.layers.len(), output_cotangent)
    }

    /// Gradient of `<acts[upto], cotangent>` with respect to the input, given
    /// activations from [`forward_prefix`](Self::forward_prefix).
    pub fn pullback(&self, acts: &[Tensor], upto: usize, cotangent: &Tensor) -> Result<Tensor> {
        let mut cot = cotangent.clone();
        for i in (0..upto).rev() {
            cot = self.layers[i].backward(i, &acts[i], &cot)?;
        }
        Ok(cot)
    }

    /// The same network with every ReLU replaced by a softplus of smoothing `t`.
    pub fn softplus_surrogate(&self, t: f64) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Relu => LayerSpec::Softplus { smoothing: t },
                other => other.clone(),
            })
            .collect();
        Self::new(self.input_shape.clone(), layers)
    }

    pub fn has_relu(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Relu))
    }
}
