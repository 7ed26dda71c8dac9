//! Model, weight and input construction shared by the subcommands.

use crate::error::{CliError, CliResult};
use crate::output::{PNG_MEAN, PNG_STD};
use clap::Args;
use serde::Serialize;
use splitwire::engine::{Tensor, WeightStore};
use splitwire::graph::{
    apply_split, build_resnet_with, ModelGraph, ResNetConfig, SplitModel, SplitPoint, TensorShape, Variant,
};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

pub const DATA_ENV: &str = "SPLITWIRE_DATA";
pub const TABLE_FILE: &str = "paper_tables.csv";

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Backbone: resnet18 or resnet34.
    #[arg(long, default_value = "resnet34", value_parser = parse_depth)]
    #[serde(rename = "depth")]
    pub model: usize,
    #[arg(long, default_value = "cifar")]
    pub variant: Variant,
    #[arg(long, default_value_t = 100)]
    pub classes: usize,
    /// Square input resolution; defaults to 32 (cifar) or 224 (standard).
    #[arg(long)]
    pub input_size: Option<usize>,
}

impl ModelArgs {
    pub fn config(&self) -> ResNetConfig {
        ResNetConfig {
            depth: self.model,
            variant: self.variant,
            num_classes: self.classes,
            input_size: self.input_size,
        }
    }

    pub fn graph(&self) -> CliResult<ModelGraph> {
        Ok(build_resnet_with(&self.config())?)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    /// Split point, e.g. SP-2.
    #[arg(long, default_value = "SP-2")]
    pub split: SplitPoint,
    /// Feature dimension; must be a power of two.
    #[arg(long = "n-c", default_value_t = 1024, value_parser = parse_nc)]
    pub n_c: usize,
    /// Decompression stages (1 or 2).
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stages: u8,
}

impl SplitArgs {
    pub fn apply(&self, graph: &ModelGraph) -> CliResult<SplitModel> {
        Ok(apply_split(graph, self.split, self.n_c, self.stages)?)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WeightArgs {
    /// Weight container; without it weights are drawn from --seed.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

impl WeightArgs {
    pub fn load(&self, model: &SplitModel, seed: u64) -> CliResult<WeightStore> {
        let store = match &self.weights {
            Some(p) => WeightStore::load(p)?,
            None => WeightStore::random_for(&[&model.encoder, &model.decoder], seed)?,
        };
        store.validate_for(&model.encoder)?;
        store.validate_for(&model.decoder)?;
        Ok(store)
    }
}

pub fn parse_depth(s: &str) -> Result<usize, String> {
    let t = s.to_ascii_lowercase();
    let digits = t.strip_prefix("resnet").unwrap_or(&t);
    match digits {
        "18" => Ok(18),
        "34" => Ok(34),
        _ => Err(format!("unsupported model `{s}` (expected resnet18 or resnet34)")),
    }
}

pub fn parse_nc(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|_| format!("`{s}` is not a count"))?;
    if n == 0 || !n.is_power_of_two() {
        return Err(format!("n_c must be a positive power of two, got {n}"));
    }
    Ok(n)
}

/// `path`, or a file of that name in `$SPLITWIRE_DATA`, or the bundled copy
/// when `path` is `bundled`.
pub enum TableSource {
    Bundled,
    File(PathBuf),
}

pub fn resolve_table(arg: &str) -> TableSource {
    if arg != "bundled" {
        return TableSource::File(PathBuf::from(arg));
    }
    match std::env::var_os(DATA_ENV) {
        Some(dir) if !dir.is_empty() => TableSource::File(Path::new(&dir).join(TABLE_FILE)),
        _ => TableSource::Bundled,
    }
}

/// Load an input tensor of `shape` from a PNG or raw little-endian CHW f32
/// file, or draw one from `seed`.
pub fn load_input(path: Option<&Path>, shape: TensorShape, seed: u64) -> CliResult<Tensor> {
    let Some(path) = path else {
        return Ok(Tensor::random_normal(shape, seed));
    };
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let data = if is_png {
        read_png(path, shape)?
    } else {
        read_raw(path, shape)?
    };
    Ok(Tensor::new(shape, data)?)
}

fn read_raw(path: &Path, shape: TensorShape) -> CliResult<Vec<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() != shape.numel() * 4 {
        return Err(CliError::usage(format!(
            "{}: expected {} bytes of f32 for a {}x{}x{} input, found {}",
            path.display(),
            shape.numel() * 4,
            shape.channels,
            shape.height,
            shape.width,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_png(path: &Path, shape: TensorShape) -> CliResult<Vec<f32>> {
    let file = File::open(path)
        .map_err(|e| CliError::Io(format!("cannot open {}: {e}", path.display())))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| CliError::usage("PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    if shape.channels != 3 || w != shape.width || h != shape.height {
        return Err(CliError::usage(format!(
            "{}: image is {w}x{h}, model expects {}x{} RGB",
            path.display(),
            shape.width,
            shape.height
        )));
    }
    let per_pixel = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(CliError::usage("indexed PNG was not expanded"));
        }
    };
    let pixels = &buf[..info.line_size * h];
    let mut out = vec![0f32; 3 * w * h];
    for y in 0..h {
        let row = &pixels[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * per_pixel..];
            let rgb = if per_pixel < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            for c in 0..3 {
                let v = rgb[c] as f32 / 255.0;
                out[c * w * h + y * w + x] = (v - PNG_MEAN[c]) / PNG_STD[c];
            }
        }
    }
    Ok(out)
}

/// Independent seed streams derived from the global `--seed`.
pub mod stream {
    pub const INPUT: u64 = 1;
    pub const NOISE: u64 = 2;
}

/// Mix `seed`, a stream id and an index into a fresh 64-bit seed (SplitMix64
/// finalizer). Never returns 0, which would mean "receiver chooses".
pub fn derived_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z.max(1)
}
