//! Feed-forward model description: a fixed vocabulary of layers and the
//! shape algebra that chains them.
//!
//! Layout conventions:
//! - activations are NHWC for spatial maps and `(batch, features)` after
//!   `flatten`/`globalavgpool`;
//! - conv kernels are `(kh, kw, in, out)`, so the row-major reshape to a
//!   `(kh*kw*in, out)` matrix is free;
//! - dense weights are `(out, in)`, i.e. `y = W x + b`.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `(kh, kw, in, out)`
    pub kernel: Tensor,
    /// `(out)`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn kernel_extents(&self) -> (usize, usize, usize, usize) {
        let s = self.kernel.shape();
        (s[0], s[1], s[2], s[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Tensor,
    /// `(out)`
    pub bias: Tensor,
}

impl Dense {
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Inverted dropout; identity in eval mode.
    Dropout {
        rate: f32,
    },
    Flatten,
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::Dropout { .. } => LayerKind::Dropout,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Dense(_))
    }

    /// Weight and bias tensors, for parameterized layers.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv2d(c) => Some((&c.kernel, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.kernel, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Dense,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dropout,
    Flatten,
    Softmax,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Dense => "dense",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::GlobalAvgPool => "globalavgpool",
            LayerKind::Dropout => "dropout",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv2d" => LayerKind::Conv2d,
            "dense" => LayerKind::Dense,
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool,
            "globalavgpool" => LayerKind::GlobalAvgPool,
            "dropout" => LayerKind::Dropout,
            "flatten" => LayerKind::Flatten,
            "softmax" => LayerKind::Softmax,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("layer {layer} ({kind}): expected input shape {expected}, got {actual:?}")]
    Shape {
        layer: usize,
        kind: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("layer {layer}: {reason}")]
    Param { layer: usize, reason: String },
    #[error("final output extent {actual} does not equal class count {classes}")]
    OutputExtent { actual: usize, classes: usize },
    #[error("model has no parameterized layer")]
    NoParameters,
}

/// Output extent along one spatial axis and the leading pad.
pub fn conv_geometry(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

/// Per-sample output shape of `layer` applied to `input`.
pub fn layer_output_shape(index: usize, layer: &Layer, input: &[usize]) -> Result<Vec<usize>, ModelError> {
    let kind = layer.kind().name();
    let shape_err = |expected: &str| ModelError::Shape {
        layer: index,
        kind,
        expected: expected.to_string(),
        actual: input.to_vec(),
    };
    match layer {
        Layer::Conv2d(c) => {
            if c.kernel.shape().len() != 4 {
                return Err(ModelError::Param {
                    layer: index,
                    reason: format!("conv kernel must be rank 4, got {:?}", c.kernel.shape()),
                });
            }
            let (kh, kw, cin, cout) = c.kernel_extents();
            if c.bias.shape() != [cout] {
                return Err(ModelError::Param {
                    layer: index,
                    reason: format!("conv bias shape {:?} != [{cout}]", c.bias.shape()),
                });
            }
            if c.stride == 0 {
                return Err(ModelError::Param {
                    layer: index,
                    reason: "stride must be >= 1".into(),
                });
            }
            if input.len() != 3 || input[2] != cin {
                return Err(shape_err(&format!("[h, w, {cin}]")));
            }
            let (oh, _) = conv_geometry(input[0], kh, c.stride, c.padding)
                .ok_or_else(|| shape_err(&format!("spatial extent >= {kh}x{kw}")))?;
            let (ow, _) = conv_geometry(input[1], kw, c.stride, c.padding)
                .ok_or_else(|| shape_err(&format!("spatial extent >= {kh}x{kw}")))?;
            Ok(vec![oh, ow, cout])
        }
        Layer::Dense(d) => {
            if d.weight.shape().len() != 2 || d.bias.shape() != [d.out_features()] {
                return Err(ModelError::Param {
                    layer: index,
                    reason: format!(
                        "dense weight {:?} / bias {:?} inconsistent",
                        d.weight.shape(),
                        d.bias.shape()
                    ),
                });
            }
            if input.len() != 1 || input[0] != d.in_features() {
                return Err(shape_err(&format!("[{}]", d.in_features())));
            }
            Ok(vec![d.out_features()])
        }
        Layer::Relu | Layer::Softmax => {
            if matches!(layer, Layer::Softmax) && input.len() != 1 {
                return Err(shape_err("[features]"));
            }
            Ok(input.to_vec())
        }
        Layer::Dropout { rate } => {
            if !(0.0..1.0).contains(rate) {
                return Err(ModelError::Param {
                    layer: index,
                    reason: format!("dropout rate {rate} outside [0, 1)"),
                });
            }
            Ok(input.to_vec())
        }
        Layer::MaxPool { window, stride } => {
            if *window == 0 || *stride == 0 {
                return Err(ModelError::Param {
                    layer: index,
                    reason: "pool window and stride must be >= 1".into(),
                });
            }
            if input.len() != 3 || input[0] < *window || input[1] < *window {
                return Err(shape_err(&format!("[h >= {window}, w >= {window}, c]")));
            }
            Ok(vec![
                (input[0] - window) / stride + 1,
                (input[1] - window) / stride + 1,
                input[2],
            ])
        }
        Layer::GlobalAvgPool => {
            if input.len() != 3 {
                return Err(shape_err("[h, w, c]"));
            }
            Ok(vec![input[2]])
        }
        Layer::Flatten => Ok(vec![input.iter().product()]),
    }
}

/// An ordered layer stack with its per-sample input shape and class count.
///
/// Activation index `k` names the output of the `k`-th layer (1-based);
/// `k = 0` is the input itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, classes: usize, layers: Vec<Layer>) -> Result<Self, ModelError> {
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape.clone());
        for (i, layer) in layers.iter().enumerate() {
            let next = layer_output_shape(i + 1, layer, shapes.last().unwrap())?;
            shapes.push(next);
        }
        if !layers.iter().any(Layer::is_parameterized) {
            return Err(ModelError::NoParameters);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 || out[0] != classes {
            return Err(ModelError::OutputExtent {
                actual: out.iter().product(),
                classes,
            });
        }
        Ok(Self {
            input_shape,
            classes,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to weights only; the layer structure is fixed.
    pub fn param_tensors_mut(&mut self) -> impl Iterator<Item = (usize, &mut Tensor, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter_map(|(i, l)| l.params_mut().map(|(w, b)| (i + 1, w, b)))
    }

    pub fn layer(&self, k: usize) -> Option<&Layer> {
        if k == 0 {
            None
        } else {
            self.layers.get(k - 1)
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of parameterized (conv/dense) layers.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| l.is_parameterized()).count()
    }

    /// Per-sample shape of activation `k`.
    pub fn activation_shape(&self, k: usize) -> Option<&[usize]> {
        self.shapes.get(k).map(Vec::as_slice)
    }

    /// Activation index holding the pre-softmax logits.
    pub fn logits_index(&self) -> usize {
        let mut k = self.layers.len();
        while k > 0 && matches!(self.layers[k - 1], Layer::Softmax) {
            k -= 1;
        }
        k
    }

    /// Output of the first convolution's activation (the relu right after
    /// it when present), or the first parameterized layer otherwise.
    pub fn first_layer_index(&self) -> usize {
        let first = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Conv2d(_)))
            .or_else(|| self.layers.iter().position(Layer::is_parameterized))
            .expect("validated model has a parameterized layer");
        match self.layers.get(first + 1) {
            Some(Layer::Relu) => first + 2,
            _ => first + 1,
        }
    }

    /// Third layer from the end, ignoring trailing softmax layers.
    pub fn third_from_last_index(&self) -> usize {
        self.logits_index().saturating_sub(2).max(1)
    }

    /// Parameterized layer weights (biases excluded), in layer order.
    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().filter_map(|l| l.params().map(|(w, _)| w))
    }
}
