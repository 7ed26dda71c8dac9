use super::ops::{self, BN_EPS};
use super::{EngineError, Result, Tensor, WeightStore};
use crate::graph::{Layer, LayerKind, ModelGraph, Padding, TensorShape};
use std::ops::Range;

/// Run every layer of `graph` on `input`.
pub fn run_graph(graph: &ModelGraph, weights: &WeightStore, input: &Tensor) -> Result<Tensor> {
    run_layers(graph, 0..graph.layers.len(), weights, input)
}

/// Run `graph.layers[range]`. The input must match the shape the first layer
/// of the range expects; inputs and outputs must be finite.
pub fn run_layers(
    graph: &ModelGraph,
    range: Range<usize>,
    weights: &WeightStore,
    input: &Tensor,
) -> Result<Tensor> {
    if range.start > range.end || range.end > graph.layers.len() {
        return Err(EngineError::Shape(format!(
            "layer range {range:?} outside graph of {} layers",
            graph.layers.len()
        )));
    }
    let expected = graph.input_of(range.start);
    if input.shape() != expected {
        return Err(EngineError::Shape(format!(
            "`{}` expects input {expected} at layer {}, got {}",
            graph.name,
            range.start,
            input.shape()
        )));
    }
    input.check_finite(&format!("input to `{}`", graph.name))?;

    let mut x = input.clone();
    for i in range {
        x = run_layer(&graph.layers[i], weights, x)?;
        debug_assert_eq!(x.shape(), graph.shapes[i], "layer {}", graph.layers[i].name);
    }
    x.check_finite(&format!("output of `{}`", graph.name))?;
    Ok(x)
}

fn bn(weights: &WeightStore, layer: &str, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let c = x.shape().channels;
    let get = |t: &str| {
        weights
            .expect(layer, &format!("{prefix}.{t}"), &[c])
            .map(|w| w.data.as_slice())
    };
    ops::batchnorm_infer(
        x,
        get("weight")?,
        get("bias")?,
        get("running_mean")?,
        get("running_var")?,
        BN_EPS,
    )
}

fn run_layer(layer: &Layer, weights: &WeightStore, x: Tensor) -> Result<Tensor> {
    let name = layer.name.as_str();
    match layer.kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            let w = weights.expect(name, &format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel])?;
            let b = if bias {
                Some(weights.expect(name, &format!("{name}.bias"), &[out_channels])?.data.as_slice())
            } else {
                None
            };
            ops::conv2d(&x, w, b, stride, padding)
        }
        LayerKind::ConvTranspose {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            bias,
        } => {
            let w = weights.expect(name, &format!("{name}.weight"), &[in_channels, out_channels, kernel, kernel])?;
            let b = if bias {
                Some(weights.expect(name, &format!("{name}.bias"), &[out_channels])?.data.as_slice())
            } else {
                None
            };
            ops::conv_transpose2d(&x, w, b, stride, padding, output_padding)
        }
        LayerKind::BatchNorm { .. } => bn(weights, name, name, &x),
        LayerKind::ReLU => {
            let mut x = x;
            ops::relu_in_place(&mut x);
            Ok(x)
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        } => ops::max_pool2d(&x, kernel, stride, padding),
        LayerKind::ResidualBasicBlock {
            in_channels,
            out_channels,
            stride,
            projection,
        } => {
            let w1 = weights.expect(name, &format!("{name}.conv1.weight"), &[out_channels, in_channels, 3, 3])?;
            let w2 = weights.expect(name, &format!("{name}.conv2.weight"), &[out_channels, out_channels, 3, 3])?;
            let mut y = ops::conv2d(&x, w1, None, stride, Padding::same(1))?;
            y = bn(weights, name, &format!("{name}.bn1"), &y)?;
            ops::relu_in_place(&mut y);
            y = ops::conv2d(&y, w2, None, 1, Padding::same(1))?;
            y = bn(weights, name, &format!("{name}.bn2"), &y)?;
            let shortcut = if projection {
                let wd = weights.expect(
                    name,
                    &format!("{name}.downsample.0.weight"),
                    &[out_channels, in_channels, 1, 1],
                )?;
                let s = ops::conv2d(&x, wd, None, stride, Padding::same(0))?;
                bn(weights, name, &format!("{name}.downsample.1"), &s)?
            } else {
                x
            };
            let mut out = ops::add(&y, &shortcut)?;
            ops::relu_in_place(&mut out);
            Ok(out)
        }
        LayerKind::GlobalAvgPool => Ok(ops::global_avg_pool(&x)),
        LayerKind::Flatten => {
            let n = x.shape().numel();
            x.reshape(TensorShape::vector(n))
        }
        LayerKind::FullyConnected {
            in_features,
            out_features,
        } => {
            let w = weights.expect(name, &format!("{name}.weight"), &[out_features, in_features])?;
            let b = weights.expect(name, &format!("{name}.bias"), &[out_features])?;
            Ok(Tensor::vector(ops::linear(x.data(), w, &b.data)?))
        }
        LayerKind::NormalizeScale => Ok(Tensor::vector(ops::normalize_scale(x.data())?)),
        LayerKind::Argmax => {
            let idx = ops::argmax(x.data())
                .ok_or_else(|| EngineError::Shape("argmax of an empty tensor".into()))?;
            Ok(Tensor::vector(vec![idx as f32]))
        }
        LayerKind::Identity => Ok(x),
    }
}
