//! Parameter and FLOP accounting.
//!
//! One FLOP is one multiply-accumulate of a convolution, transposed
//! convolution or fully connected layer. Batch norm, activations, pooling and
//! residual additions cost nothing. Transposed convolutions are charged
//! `out_elements * in_channels * k^2`, the per-output-element convention used
//! by common model profilers; this is what the published per-split budgets
//! were measured with.

use super::{LayerKind, ModelGraph, SplitModel, TensorShape};
use serde::{Deserialize, Serialize};

/// How batch-norm layers contribute to parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnCounting {
    /// gamma, beta, running mean and running variance: 4 per channel.
    #[default]
    WithRunningStats,
    /// Trainable affine pair only: 2 per channel.
    AffineOnly,
}

impl BnCounting {
    fn per_channel(self) -> u64 {
        match self {
            BnCounting::WithRunningStats => 4,
            BnCounting::AffineOnly => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Transmitter,
    Receiver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub side: Side,
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub output_shape: TensorShape,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    /// F_{M_t}
    pub f_m_t: u64,
    /// F_{M_r}
    pub f_m_r: u64,
    /// F_M of the unsplit model.
    pub f_m: u64,
    pub layers: Vec<LayerCost>,
}

impl FlopReport {
    pub fn split_total(&self) -> u64 {
        self.f_m_t + self.f_m_r
    }

    /// Transmitter share of the split total, in percent.
    pub fn tx_percent(&self) -> f64 {
        percent(self.f_m_t, self.split_total())
    }

    pub fn rx_percent(&self) -> f64 {
        percent(self.f_m_r, self.split_total())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub params_t: u64,
    pub params_r: u64,
    pub params_total: u64,
    pub counting: BnCounting,
}

impl ParamReport {
    pub fn tx_percent(&self) -> f64 {
        percent(self.params_t, self.params_total)
    }

    pub fn rx_percent(&self) -> f64 {
        percent(self.params_r, self.params_total)
    }
}

fn percent(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * part as f64 / total as f64
    }
}

/// Anything that can be costed: a whole graph (all on the transmitter) or a
/// split model.
pub trait FlopCount {
    fn flop_report(&self) -> FlopReport;
    fn param_report(&self, counting: BnCounting) -> ParamReport;
}

impl FlopCount for ModelGraph {
    fn flop_report(&self) -> FlopReport {
        let layers = layer_costs(self, Side::Transmitter, BnCounting::default());
        let total = layers.iter().map(|l| l.macs).sum();
        FlopReport {
            f_m_t: total,
            f_m_r: 0,
            f_m: total,
            layers,
        }
    }

    fn param_report(&self, counting: BnCounting) -> ParamReport {
        let total = graph_params(self, counting);
        ParamReport {
            params_t: total,
            params_r: 0,
            params_total: total,
            counting,
        }
    }
}

impl FlopCount for SplitModel {
    fn flop_report(&self) -> FlopReport {
        let mut layers = layer_costs(&self.encoder, Side::Transmitter, BnCounting::default());
        layers.extend(layer_costs(&self.decoder, Side::Receiver, BnCounting::default()));
        let sum = |side| layers.iter().filter(|l| l.side == side).map(|l| l.macs).sum();
        FlopReport {
            f_m_t: sum(Side::Transmitter),
            f_m_r: sum(Side::Receiver),
            f_m: self.base_macs,
            layers,
        }
    }

    fn param_report(&self, counting: BnCounting) -> ParamReport {
        let params_t = graph_params(&self.encoder, counting);
        let params_r = graph_params(&self.decoder, counting);
        ParamReport {
            params_t,
            params_r,
            params_total: params_t + params_r,
            counting,
        }
    }
}

pub fn count_flops<T: FlopCount + ?Sized>(model: &T) -> FlopReport {
    model.flop_report()
}

pub fn count_params<T: FlopCount + ?Sized>(model: &T) -> ParamReport {
    model.param_report(BnCounting::default())
}

pub fn count_params_with<T: FlopCount + ?Sized>(model: &T, counting: BnCounting) -> ParamReport {
    model.param_report(counting)
}

pub(crate) fn graph_macs(graph: &ModelGraph) -> u64 {
    (0..graph.layers.len())
        .map(|i| layer_macs(&graph.layers[i].kind, graph.shapes[i]))
        .sum()
}

fn graph_params(graph: &ModelGraph, counting: BnCounting) -> u64 {
    graph
        .layers
        .iter()
        .map(|l| layer_params(&l.kind, counting))
        .sum()
}

fn layer_costs(graph: &ModelGraph, side: Side, counting: BnCounting) -> Vec<LayerCost> {
    graph
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| LayerCost {
            side,
            index: i,
            name: layer.name.clone(),
            kind: layer.kind.label().to_string(),
            output_shape: graph.shapes[i],
            macs: layer_macs(&layer.kind, graph.shapes[i]),
            params: layer_params(&layer.kind, counting),
        })
        .collect()
}

pub(crate) fn layer_macs(kind: &LayerKind, output: TensorShape) -> u64 {
    let out = output.numel() as u64;
    match *kind {
        LayerKind::Conv {
            in_channels,
            kernel,
            ..
        }
        | LayerKind::ConvTranspose {
            in_channels,
            kernel,
            ..
        } => out * (in_channels * kernel * kernel) as u64,
        LayerKind::FullyConnected {
            in_features,
            out_features,
        } => (in_features * out_features) as u64,
        LayerKind::ResidualBasicBlock {
            in_channels,
            out_channels,
            projection,
            ..
        } => {
            let first = out * (in_channels * 9) as u64;
            let second = out * (out_channels * 9) as u64;
            let shortcut = if projection {
                out * in_channels as u64
            } else {
                0
            };
            first + second + shortcut
        }
        _ => 0,
    }
}

pub(crate) fn layer_params(kind: &LayerKind, counting: BnCounting) -> u64 {
    let bn = |c: usize| c as u64 * counting.per_channel();
    match *kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            bias,
            ..
        }
        | LayerKind::ConvTranspose {
            in_channels,
            out_channels,
            kernel,
            bias,
            ..
        } => {
            (in_channels * out_channels * kernel * kernel) as u64
                + if bias { out_channels as u64 } else { 0 }
        }
        LayerKind::BatchNorm { channels } => bn(channels),
        LayerKind::FullyConnected {
            in_features,
            out_features,
        } => (in_features * out_features + out_features) as u64,
        LayerKind::ResidualBasicBlock {
            in_channels,
            out_channels,
            projection,
            ..
        } => {
            let convs = (in_channels * out_channels * 9 + out_channels * out_channels * 9) as u64;
            let shortcut = if projection {
                (in_channels * out_channels) as u64 + bn(out_channels)
            } else {
                0
            };
            convs + 2 * bn(out_channels) + shortcut
        }
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescription {
    pub index: usize,
    pub name: String,
    pub layer: LayerKind,
    pub input_shape: TensorShape,
    pub output_shape: TensorShape,
    pub macs: u64,
    pub params: u64,
}

/// Exportable summary of a graph: layers, shapes and per-layer costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDescription {
    pub name: String,
    pub input_shape: TensorShape,
    pub output_shape: TensorShape,
    pub total_macs: u64,
    pub total_params: u64,
    pub layers: Vec<LayerDescription>,
}

impl ModelGraph {
    pub fn describe(&self) -> GraphDescription {
        let layers: Vec<_> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerDescription {
                index: i,
                name: l.name.clone(),
                layer: l.kind.clone(),
                input_shape: self.input_of(i),
                output_shape: self.shapes[i],
                macs: layer_macs(&l.kind, self.shapes[i]),
                params: layer_params(&l.kind, BnCounting::default()),
            })
            .collect();
        GraphDescription {
            name: self.name.clone(),
            input_shape: self.input_shape,
            output_shape: self.output_shape(),
            total_macs: layers.iter().map(|l| l.macs).sum(),
            total_params: layers.iter().map(|l| l.params).sum(),
            layers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{apply_split, build_resnet, Layer, Padding, SplitPoint, Variant};

    #[test]
    fn single_conv_counts() {
        let g = ModelGraph::new(
            "one",
            TensorShape::new(3, 32, 32),
            vec![Layer::new(
                "conv1",
                LayerKind::Conv {
                    in_channels: 3,
                    out_channels: 64,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::same(1),
                    bias: false,
                },
            )],
        )
        .unwrap();
        assert_eq!(count_params(&g).params_total, 1_728);
        assert_eq!(count_flops(&g).f_m_t, 1_769_472);
    }

    #[test]
    fn split_params_are_additive() {
        let g = build_resnet(18, Variant::Cifar, 10).unwrap();
        for sp in SplitPoint::ALL {
            let m = apply_split(&g, sp, 256, 2).unwrap();
            for counting in [BnCounting::WithRunningStats, BnCounting::AffineOnly] {
                let p = count_params_with(&m, counting);
                assert_eq!(p.params_t + p.params_r, p.params_total);
                let direct: u64 = m
                    .encoder
                    .layers
                    .iter()
                    .chain(m.decoder.layers.iter())
                    .map(|l| layer_params(&l.kind, counting))
                    .sum();
                assert_eq!(direct, p.params_total);
            }
            let f = count_flops(&m);
            let per_layer: u64 = f.layers.iter().map(|l| l.macs).sum();
            assert_eq!(per_layer, f.split_total());
            assert!((f.tx_percent() + f.rx_percent() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bn_counting_differs_by_two_per_channel() {
        let g = build_resnet(34, Variant::Cifar, 100).unwrap();
        let full = count_params_with(&g, BnCounting::WithRunningStats).params_total;
        let affine = count_params_with(&g, BnCounting::AffineOnly).params_total;
        // 8_512 batch-norm channels in the CIFAR ResNet-34
        assert_eq!(full - affine, 2 * 8_512);
    }

    #[test]
    fn description_totals_match_reports() {
        let g = build_resnet(18, Variant::Cifar, 10).unwrap();
        let d = g.describe();
        assert_eq!(d.total_macs, count_flops(&g).f_m);
        assert_eq!(d.total_params, count_params(&g).params_total);
        let json = serde_json::to_string(&d).unwrap();
        let back: GraphDescription = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }
}
