use super::{
    accounting::graph_macs, GraphError, Layer, LayerKind, ModelGraph, Padding, TensorShape,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The seven named cut positions of the ResNet pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SplitPoint {
    Sp0,
    Sp1,
    Sp2,
    Sp3,
    Sp4,
    Sp5,
    Sp6,
}

impl SplitPoint {
    pub const ALL: [SplitPoint; 7] = [
        SplitPoint::Sp0,
        SplitPoint::Sp1,
        SplitPoint::Sp2,
        SplitPoint::Sp3,
        SplitPoint::Sp4,
        SplitPoint::Sp5,
        SplitPoint::Sp6,
    ];

    /// The split-inference points, i.e. everything but raw-image and label
    /// transmission.
    pub const INNER: [SplitPoint; 5] = [
        SplitPoint::Sp1,
        SplitPoint::Sp2,
        SplitPoint::Sp3,
        SplitPoint::Sp4,
        SplitPoint::Sp5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn boundary(self) -> &'static str {
        match self {
            SplitPoint::Sp0 => "train_loader-conv1",
            SplitPoint::Sp1 => "conv1-conv2_x",
            SplitPoint::Sp2 => "conv2_x-conv3_x",
            SplitPoint::Sp3 => "conv3_x-conv4_x",
            SplitPoint::Sp4 => "conv4_x-conv5_x",
            SplitPoint::Sp5 => "conv5_x-avgpool,fc",
            SplitPoint::Sp6 => "output_logits-argmax",
        }
    }

    /// True for the points that carry a compressed feature vector.
    pub fn is_inner(self) -> bool {
        !matches!(self, SplitPoint::Sp0 | SplitPoint::Sp6)
    }
}

impl fmt::Display for SplitPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SP-{}", self.index())
    }
}

impl FromStr for SplitPoint {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_uppercase();
        let digits = t
            .strip_prefix("SP-")
            .or_else(|| t.strip_prefix("SP"))
            .unwrap_or(&t);
        digits
            .parse::<usize>()
            .ok()
            .and_then(SplitPoint::from_index)
            .ok_or_else(|| GraphError::UnknownSplit(s.to_string()))
    }
}

impl TryFrom<String> for SplitPoint {
    type Error = GraphError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SplitPoint> for String {
    fn from(sp: SplitPoint) -> String {
        sp.to_string()
    }
}

/// Shape of the compression and decompression modules.
///
/// Compression is one `kernel x kernel` convolution that lands the boundary
/// map on a `g x g` grid with `n_c / g^2` channels, where `g` is the largest
/// grid up to `max_grid` that divides `n_c`; the result is flattened to `z`.
///
/// Decompression treats `z` as an `(n_c, 1, 1)` map and upsamples it with
/// transposed convolutions whose kernel equals their stride: one stage of
/// kernel `H`, or two stages through a `first_grid x first_grid` map with
/// `hidden_channels` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub compress_kernel: usize,
    pub max_grid: usize,
    pub hidden_channels: Option<usize>,
    pub first_grid: Option<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            compress_kernel: 4,
            max_grid: 4,
            hidden_channels: None,
            first_grid: None,
        }
    }
}

/// Hidden width of the two-stage decompression at each split. These widths
/// reproduce the published per-split FLOP and parameter budgets of the
/// CIFAR ResNet-34 at `n_c = 1024`.
pub fn reference_hidden_channels(split: SplitPoint) -> usize {
    match split {
        SplitPoint::Sp4 => 128,
        _ => 256,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub decompress_stages: u8,
    pub codec: CodecConfig,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            decompress_stages: 2,
            codec: CodecConfig::default(),
        }
    }
}

/// Encoder `M_t` and decoder `M_r` of a partitioned model.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub encoder: ModelGraph,
    pub decoder: ModelGraph,
    pub split: SplitPoint,
    /// Number of values crossing the link: the feature dimension at inner
    /// splits, the image size at SP-0 and 1 (the label) at SP-6.
    pub n_c: usize,
    pub decompress_stages: u8,
    /// MAC count of the unsplit model the halves were cut from.
    pub base_macs: u64,
    pub base_name: String,
}

impl SplitModel {
    /// Encoder and decoder joined into one graph, channel omitted.
    pub fn monolithic(&self) -> ModelGraph {
        let mut layers = self.encoder.layers.clone();
        layers.extend(self.decoder.layers.iter().cloned());
        let mut shapes = self.encoder.shapes.clone();
        shapes.extend(self.decoder.shapes.iter().copied());
        ModelGraph {
            name: format!("{}.joined", self.encoder.name),
            input_shape: self.encoder.input_shape,
            layers,
            shapes,
            boundaries: None,
        }
    }

    pub fn payload_shape(&self) -> TensorShape {
        self.encoder.output_shape()
    }
}

pub fn apply_split(
    graph: &ModelGraph,
    split: SplitPoint,
    n_c: usize,
    decompress_stages: u8,
) -> Result<SplitModel, GraphError> {
    apply_split_with(
        graph,
        split,
        n_c,
        SplitOptions {
            decompress_stages,
            codec: CodecConfig::default(),
        },
    )
}

pub fn apply_split_with(
    graph: &ModelGraph,
    split: SplitPoint,
    n_c: usize,
    options: SplitOptions,
) -> Result<SplitModel, GraphError> {
    let cuts = graph
        .boundaries
        .ok_or_else(|| GraphError::NotSplittable(graph.name.clone()))?;
    if !matches!(options.decompress_stages, 1 | 2) {
        return Err(GraphError::InvalidConfig(format!(
            "decompress_stages must be 1 or 2, got {}",
            options.decompress_stages
        )));
    }
    let base_macs = graph_macs(graph);
    let enc_name = format!("{}.enc.{}", graph.name, split);
    let dec_name = format!("{}.dec.{}", graph.name, split);

    let (encoder, decoder, payload) = match split {
        SplitPoint::Sp0 => {
            let encoder = ModelGraph::new(
                enc_name,
                graph.input_shape,
                vec![Layer::new("transmit", LayerKind::Identity)],
            )?;
            let decoder = ModelGraph::new(dec_name, graph.input_shape, graph.layers.clone())?;
            (encoder, decoder, graph.input_shape.numel())
        }
        SplitPoint::Sp6 => {
            let mut layers = graph.layers.clone();
            layers.push(Layer::new("argmax", LayerKind::Argmax));
            let encoder = ModelGraph::new(enc_name, graph.input_shape, layers)?;
            let decoder = ModelGraph::new(
                dec_name,
                TensorShape::vector(1),
                vec![Layer::new("receive", LayerKind::Identity)],
            )?;
            (encoder, decoder, 1)
        }
        _ => {
            if n_c == 0 {
                return Err(GraphError::InvalidConfig("n_c must be at least 1".into()));
            }
            let cut = cuts[split.index()];
            let boundary = graph.input_of(cut);
            if n_c > boundary.numel() {
                return Err(GraphError::NcTooLarge {
                    n_c,
                    boundary: boundary.numel(),
                });
            }
            let mut enc_layers = graph.layers[..cut].to_vec();
            enc_layers.extend(compression_layers(boundary, n_c, &options.codec)?);
            let encoder = ModelGraph::new(enc_name, graph.input_shape, enc_layers)?;

            let mut dec_layers =
                decompression_layers(boundary, n_c, split, options.decompress_stages, &options.codec)?;
            dec_layers.extend(graph.layers[cut..].iter().cloned());
            let decoder = ModelGraph::new(dec_name, TensorShape::vector(n_c), dec_layers)?;
            // The first backbone layer of the decoder must see the boundary shape.
            let restored = decoder.shapes[options.decompress_stages as usize * 2 - 2];
            if restored != boundary {
                return Err(GraphError::InvalidConfig(format!(
                    "decompression restores {restored}, boundary is {boundary}"
                )));
            }
            (encoder, decoder, n_c)
        }
    };

    Ok(SplitModel {
        encoder,
        decoder,
        split,
        n_c: payload,
        decompress_stages: options.decompress_stages,
        base_macs,
        base_name: graph.name.clone(),
    })
}

fn square_side(boundary: TensorShape) -> Result<usize, GraphError> {
    if boundary.height != boundary.width {
        return Err(GraphError::InvalidConfig(format!(
            "codec needs a square boundary map, got {boundary}"
        )));
    }
    Ok(boundary.height)
}

fn compression_layers(
    boundary: TensorShape,
    n_c: usize,
    codec: &CodecConfig,
) -> Result<Vec<Layer>, GraphError> {
    let side = square_side(boundary)?;
    let kernel = codec.compress_kernel;
    if kernel == 0 || codec.max_grid == 0 {
        return Err(GraphError::InvalidConfig("codec kernel and grid must be positive".into()));
    }
    let grid = (1..=codec.max_grid.min(side))
        .rev()
        .find(|g| n_c.is_multiple_of(g * g))
        .unwrap_or(1);
    let stride = (side / grid).max(1);
    let total_pad = ((grid - 1) * stride + kernel).saturating_sub(side);
    let padding = Padding {
        begin: total_pad / 2,
        end: total_pad - total_pad / 2,
    };
    let conv = LayerKind::Conv {
        in_channels: boundary.channels,
        out_channels: n_c / (grid * grid),
        kernel,
        stride,
        padding,
        bias: true,
    };
    let out = conv
        .output_shape(boundary)
        .map_err(GraphError::InvalidConfig)?;
    if out.height != grid || out.width != grid {
        return Err(GraphError::InvalidConfig(format!(
            "compression kernel {kernel} cannot reach a {grid}x{grid} grid from {boundary}"
        )));
    }
    Ok(vec![
        Layer::new("compress", conv),
        Layer::new("compress.flatten", LayerKind::Flatten),
        Layer::new("normalize", LayerKind::NormalizeScale),
    ])
}

fn decompression_layers(
    boundary: TensorShape,
    n_c: usize,
    split: SplitPoint,
    stages: u8,
    codec: &CodecConfig,
) -> Result<Vec<Layer>, GraphError> {
    let side = square_side(boundary)?;
    let up = |name: &str, cin: usize, cout: usize, k: usize| {
        Layer::new(
            name,
            LayerKind::ConvTranspose {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: k,
                padding: 0,
                output_padding: 0,
                bias: true,
            },
        )
    };
    if stages == 1 {
        return Ok(vec![up("decompress.0", n_c, boundary.channels, side)]);
    }
    let first = match codec.first_grid {
        Some(g) => g,
        None => (1..=(side / 2).clamp(1, 4))
            .rev()
            .find(|g| side % g == 0)
            .unwrap_or(1),
    };
    if first == 0 || side % first != 0 {
        return Err(GraphError::InvalidConfig(format!(
            "first decompression grid {first} does not divide boundary side {side}"
        )));
    }
    let hidden = codec
        .hidden_channels
        .unwrap_or_else(|| reference_hidden_channels(split));
    Ok(vec![
        up("decompress.0", n_c, hidden, first),
        Layer::new("decompress.relu", LayerKind::ReLU),
        up("decompress.1", hidden, boundary.channels, side / first),
    ])
}
