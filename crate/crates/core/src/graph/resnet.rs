use super::{GraphError, Layer, LayerKind, ModelGraph, Padding, TensorShape};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Stem layout: `Cifar` swaps the 7x7/stride-2 conv and max-pool for a single
/// 3x3/stride-1 conv so 32x32 inputs keep their resolution through conv2_x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cifar,
    Standard,
}

impl Variant {
    pub fn default_input(self) -> TensorShape {
        match self {
            Variant::Cifar => TensorShape::new(3, 32, 32),
            Variant::Standard => TensorShape::new(3, 224, 224),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cifar => "cifar",
            Variant::Standard => "standard",
        })
    }
}

impl FromStr for Variant {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cifar" => Ok(Variant::Cifar),
            "standard" | "imagenet" => Ok(Variant::Standard),
            other => Err(GraphError::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub depth: usize,
    pub variant: Variant,
    pub num_classes: usize,
    /// Square input resolution; defaults to 32 (cifar) or 224 (standard).
    pub input_size: Option<usize>,
}

impl ResNetConfig {
    pub fn new(depth: usize, variant: Variant, num_classes: usize) -> Self {
        Self {
            depth,
            variant,
            num_classes,
            input_size: None,
        }
    }

    pub fn input_shape(&self) -> TensorShape {
        match self.input_size {
            Some(s) => TensorShape::new(3, s, s),
            None => self.variant.default_input(),
        }
    }

    pub fn stage_blocks(&self) -> Result<[usize; 4], GraphError> {
        match self.depth {
            18 => Ok([2, 2, 2, 2]),
            34 => Ok([3, 4, 6, 3]),
            d => Err(GraphError::UnsupportedDepth(d)),
        }
    }

    pub fn graph_name(&self) -> String {
        format!("resnet{}-{}-c{}", self.depth, self.variant, self.num_classes)
    }
}

pub fn build_resnet(depth: usize, variant: Variant, num_classes: usize) -> Result<ModelGraph, GraphError> {
    build_resnet_with(&ResNetConfig::new(depth, variant, num_classes))
}

pub fn build_resnet_with(config: &ResNetConfig) -> Result<ModelGraph, GraphError> {
    let blocks = config.stage_blocks()?;
    if config.num_classes < 2 {
        return Err(GraphError::InvalidConfig(format!(
            "num_classes must be at least 2, got {}",
            config.num_classes
        )));
    }

    let mut layers = Vec::new();
    match config.variant {
        Variant::Cifar => {
            layers.push(Layer::new("conv1", conv(3, 64, 3, 1, 1)));
            layers.push(Layer::new("bn1", LayerKind::BatchNorm { channels: 64 }));
            layers.push(Layer::new("relu", LayerKind::ReLU));
        }
        Variant::Standard => {
            layers.push(Layer::new("conv1", conv(3, 64, 7, 2, 3)));
            layers.push(Layer::new("bn1", LayerKind::BatchNorm { channels: 64 }));
            layers.push(Layer::new("relu", LayerKind::ReLU));
            layers.push(Layer::new(
                "maxpool",
                LayerKind::MaxPool {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ));
        }
    }

    let mut boundaries = [0usize; 7];
    boundaries[1] = layers.len();
    let widths = [64usize, 128, 256, 512];
    let mut in_ch = 64;
    for (stage, (&count, &width)) in blocks.iter().zip(widths.iter()).enumerate() {
        for b in 0..count {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let projection = stride != 1 || in_ch != width;
            layers.push(Layer::new(
                format!("layer{}.{}", stage + 1, b),
                LayerKind::ResidualBasicBlock {
                    in_channels: in_ch,
                    out_channels: width,
                    stride,
                    projection,
                },
            ));
            in_ch = width;
        }
        boundaries[stage + 2] = layers.len();
    }

    layers.push(Layer::new("avgpool", LayerKind::GlobalAvgPool));
    layers.push(Layer::new("flatten", LayerKind::Flatten));
    layers.push(Layer::new(
        "fc",
        LayerKind::FullyConnected {
            in_features: 512,
            out_features: config.num_classes,
        },
    ));
    boundaries[6] = layers.len();

    let mut graph = ModelGraph::new(config.graph_name(), config.input_shape(), layers)?;
    graph.boundaries = Some(boundaries);
    Ok(graph)
}

fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> LayerKind {
    LayerKind::Conv {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: s,
        padding: Padding::same(p),
        bias: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SplitPoint;

    #[test]
    fn cifar_stem_is_single_3x3_conv() {
        let g = build_resnet(34, Variant::Cifar, 100).unwrap();
        assert_eq!(g.layers[0].kind, conv(3, 64, 3, 1, 1));
        assert!(!g.layers.iter().any(|l| matches!(l.kind, LayerKind::MaxPool { .. })));
        assert_eq!(g.output_shape(), TensorShape::vector(100));
    }

    #[test]
    fn standard_stem_has_maxpool() {
        let g = build_resnet(34, Variant::Standard, 1000).unwrap();
        assert_eq!(g.layers[0].kind, conv(3, 64, 7, 2, 3));
        assert!(matches!(g.layers[3].kind, LayerKind::MaxPool { .. }));
        assert_eq!(
            g.boundary_shape(SplitPoint::Sp2).unwrap(),
            TensorShape::new(64, 56, 56)
        );
    }

    #[test]
    fn block_counts() {
        let blocks = |d| {
            build_resnet(d, Variant::Cifar, 10)
                .unwrap()
                .layers
                .iter()
                .filter(|l| matches!(l.kind, LayerKind::ResidualBasicBlock { .. }))
                .count()
        };
        assert_eq!(blocks(18), 8);
        assert_eq!(blocks(34), 16);
    }

    #[test]
    fn rejects_bad_config() {
        assert_eq!(
            build_resnet(50, Variant::Cifar, 10).unwrap_err(),
            GraphError::UnsupportedDepth(50)
        );
        assert!(build_resnet(18, Variant::Cifar, 1).is_err());
    }

    #[test]
    fn stage_shapes_cifar34() {
        let g = build_resnet(34, Variant::Cifar, 100).unwrap();
        let at = |sp| g.boundary_shape(sp).unwrap();
        assert_eq!(at(SplitPoint::Sp0), TensorShape::new(3, 32, 32));
        assert_eq!(at(SplitPoint::Sp1), TensorShape::new(64, 32, 32));
        assert_eq!(at(SplitPoint::Sp2), TensorShape::new(64, 32, 32));
        assert_eq!(at(SplitPoint::Sp3), TensorShape::new(128, 16, 16));
        assert_eq!(at(SplitPoint::Sp4), TensorShape::new(256, 8, 8));
        assert_eq!(at(SplitPoint::Sp5), TensorShape::new(512, 4, 4));
        let pool = g.layers.iter().position(|l| l.name == "avgpool").unwrap();
        assert_eq!(g.shapes[pool], TensorShape::new(512, 1, 1));
    }

    #[test]
    fn deterministic_build() {
        let a = build_resnet(18, Variant::Cifar, 10).unwrap();
        let b = build_resnet(18, Variant::Cifar, 10).unwrap();
        assert_eq!(a, b);
    }
}
