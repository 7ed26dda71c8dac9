//! Layer graphs for basic-block ResNets and their split variants.
//!
//! A [`ModelGraph`] is a flat, ordered list of [`Layer`]s. Residual blocks are
//! kept as single composite layers so that split boundaries always fall between
//! entries of the list. Shape inference runs on construction and every layer
//! carries its inferred output shape.

mod accounting;
mod resnet;
mod split;

pub use accounting::{
    count_flops, count_params, count_params_with, BnCounting, FlopCount, FlopReport,
    GraphDescription, LayerCost, LayerDescription, ParamReport, Side,
};
pub use resnet::{build_resnet, build_resnet_with, ResNetConfig, Variant};
pub use split::{
    apply_split, apply_split_with, reference_hidden_channels, CodecConfig, SplitModel,
    SplitOptions, SplitPoint,
};

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("unsupported ResNet depth {0} (expected 18 or 34)")]
    UnsupportedDepth(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("layer {index} ({name}): expected input {expected}, found {found}")]
    ShapeMismatch {
        index: usize,
        name: String,
        expected: TensorShape,
        found: TensorShape,
    },
    #[error("layer {index} ({name}): {reason}")]
    InvalidLayer {
        index: usize,
        name: String,
        reason: String,
    },
    #[error("graph `{0}` has no split boundaries (only vanilla ResNet graphs can be split)")]
    NotSplittable(String),
    #[error("n_c = {n_c} exceeds the flattened boundary size {boundary} (compression must compress)")]
    NcTooLarge { n_c: usize, boundary: usize },
    #[error("unknown split point `{0}`")]
    UnknownSplit(String),
}

/// Channel-major activation shape. Flattened vectors are `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn vector(n: usize) -> Self {
        Self::new(n, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn is_valid(&self) -> bool {
        self.channels >= 1 && self.height >= 1 && self.width >= 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

/// Zero padding before and after each spatial axis. Symmetric unless a
/// compression stage needs an even kernel to land on an exact grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub begin: usize,
    pub end: usize,
}

impl Padding {
    pub fn same(p: usize) -> Self {
        Self { begin: p, end: p }
    }

    pub fn total(&self) -> usize {
        self.begin + self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    ReLU,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Two 3x3 convolutions with batch norm, plus an identity or 1x1
    /// projection shortcut, followed by the post-add ReLU.
    ResidualBasicBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        projection: bool,
    },
    GlobalAvgPool,
    Flatten,
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    /// l2-normalize the flattened input and scale it to norm sqrt(n).
    NormalizeScale,
    /// Index of the largest logit, emitted as a single value.
    Argmax,
    Identity,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "Conv",
            LayerKind::ConvTranspose { .. } => "ConvTranspose",
            LayerKind::BatchNorm { .. } => "BatchNorm",
            LayerKind::ReLU => "ReLU",
            LayerKind::MaxPool { .. } => "MaxPool",
            LayerKind::ResidualBasicBlock { .. } => "ResidualBasicBlock",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::Flatten => "Flatten",
            LayerKind::FullyConnected { .. } => "FullyConnected",
            LayerKind::NormalizeScale => "NormalizeScale",
            LayerKind::Argmax => "Argmax",
            LayerKind::Identity => "Identity",
        }
    }

    /// Output shape for `input`, or a reason the layer cannot accept it.
    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape, String> {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                check_channels(in_channels, input)?;
                check_window(kernel, stride)?;
                let h = window_out(input.height, kernel, stride, padding.total())?;
                let w = window_out(input.width, kernel, stride, padding.total())?;
                Ok(TensorShape::new(out_channels, h, w))
            }
            LayerKind::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
                ..
            } => {
                check_channels(in_channels, input)?;
                check_window(kernel, stride)?;
                if output_padding >= stride {
                    return Err(format!(
                        "output_padding {output_padding} must be smaller than stride {stride}"
                    ));
                }
                let out = |n: usize| -> Result<usize, String> {
                    let full = (n - 1) * stride + kernel + output_padding;
                    full.checked_sub(2 * padding)
                        .filter(|&v| v >= 1)
                        .ok_or_else(|| format!("padding {padding} too large for input {n}"))
                };
                Ok(TensorShape::new(
                    out_channels,
                    out(input.height)?,
                    out(input.width)?,
                ))
            }
            LayerKind::BatchNorm { channels } => {
                check_channels(channels, input)?;
                Ok(input)
            }
            LayerKind::ReLU | LayerKind::Identity => Ok(input),
            LayerKind::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                check_window(kernel, stride)?;
                let h = window_out(input.height, kernel, stride, 2 * padding)?;
                let w = window_out(input.width, kernel, stride, 2 * padding)?;
                Ok(TensorShape::new(input.channels, h, w))
            }
            LayerKind::ResidualBasicBlock {
                in_channels,
                out_channels,
                stride,
                projection,
            } => {
                check_channels(in_channels, input)?;
                if stride == 0 {
                    return Err("stride must be at least 1".into());
                }
                if !projection && (stride != 1 || in_channels != out_channels) {
                    return Err("identity shortcut requires stride 1 and equal channels".into());
                }
                let h = window_out(input.height, 3, stride, 2)?;
                let w = window_out(input.width, 3, stride, 2)?;
                Ok(TensorShape::new(out_channels, h, w))
            }
            LayerKind::GlobalAvgPool => Ok(TensorShape::vector(input.channels)),
            LayerKind::Flatten | LayerKind::NormalizeScale => {
                Ok(TensorShape::vector(input.numel()))
            }
            LayerKind::FullyConnected {
                in_features,
                out_features,
            } => {
                if input.numel() != in_features {
                    return Err(format!(
                        "expects {in_features} features, got {}",
                        input.numel()
                    ));
                }
                Ok(TensorShape::vector(out_features))
            }
            LayerKind::Argmax => Ok(TensorShape::vector(1)),
        }
    }
}

fn check_channels(expected: usize, input: TensorShape) -> Result<(), String> {
    if expected != input.channels {
        Err(format!(
            "expects {expected} input channels, got {}",
            input.channels
        ))
    } else {
        Ok(())
    }
}

fn check_window(kernel: usize, stride: usize) -> Result<(), String> {
    if kernel == 0 || stride == 0 {
        Err("kernel and stride must be at least 1".into())
    } else {
        Ok(())
    }
}

fn window_out(n: usize, kernel: usize, stride: usize, total_pad: usize) -> Result<usize, String> {
    let padded = n + total_pad;
    if padded < kernel {
        return Err(format!("kernel {kernel} larger than padded extent {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

/// A named layer. Names double as weight-store prefixes (`conv1.weight`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: TensorShape,
    pub layers: Vec<Layer>,
    /// Output shape of each layer, parallel to `layers`.
    pub shapes: Vec<TensorShape>,
    /// Layer index at which each split point cuts (SP-0 ... SP-6).
    /// Only vanilla ResNet graphs carry boundaries.
    pub(crate) boundaries: Option<[usize; 7]>,
}

impl ModelGraph {
    pub fn new(
        name: impl Into<String>,
        input_shape: TensorShape,
        layers: Vec<Layer>,
    ) -> Result<Self, GraphError> {
        let mut graph = Self {
            name: name.into(),
            input_shape,
            layers,
            shapes: Vec::new(),
            boundaries: None,
        };
        graph.shapes = shape_trace(&graph.layers, input_shape)?;
        Ok(graph)
    }

    pub fn output_shape(&self) -> TensorShape {
        self.shapes.last().copied().unwrap_or(self.input_shape)
    }

    /// Input shape seen by layer `index`.
    pub fn input_of(&self, index: usize) -> TensorShape {
        if index == 0 {
            self.input_shape
        } else {
            self.shapes[index - 1]
        }
    }

    pub fn boundaries(&self) -> Option<&[usize; 7]> {
        self.boundaries.as_ref()
    }

    /// Activation shape at a split boundary of a vanilla graph.
    pub fn boundary_shape(&self, split: SplitPoint) -> Option<TensorShape> {
        let cut = self.boundaries?[split.index()];
        Some(self.input_of(cut))
    }
}

/// Re-run shape inference from `input_shape`, returning a graph with every
/// layer annotated.
pub fn infer_shapes(graph: &ModelGraph, input_shape: TensorShape) -> Result<ModelGraph, GraphError> {
    if input_shape != graph.input_shape {
        return Err(GraphError::ShapeMismatch {
            index: 0,
            name: graph.layers.first().map(|l| l.name.clone()).unwrap_or_default(),
            expected: graph.input_shape,
            found: input_shape,
        });
    }
    let mut out = graph.clone();
    out.shapes = shape_trace(&graph.layers, input_shape)?;
    Ok(out)
}

fn shape_trace(layers: &[Layer], input: TensorShape) -> Result<Vec<TensorShape>, GraphError> {
    if !input.is_valid() {
        return Err(GraphError::InvalidConfig(format!(
            "input shape {input} has a zero dimension"
        )));
    }
    let mut shapes = Vec::with_capacity(layers.len());
    let mut current = input;
    for (index, layer) in layers.iter().enumerate() {
        current = layer
            .kind
            .output_shape(current)
            .map_err(|reason| GraphError::InvalidLayer {
                index,
                name: layer.name.clone(),
                reason,
            })?;
        if !current.is_valid() {
            return Err(GraphError::InvalidLayer {
                index,
                name: layer.name.clone(),
                reason: format!("produces degenerate shape {current}"),
            });
        }
        shapes.push(current);
    }
    Ok(shapes)
}
