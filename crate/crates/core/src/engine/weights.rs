//! Named f32 weight tensors and their on-disk container.
//!
//! Layout: magic `SWWT`, u16 LE version, u32 LE manifest length, a JSON
//! manifest `[{name, dtype, shape, offset, byte_length}]`, then the raw
//! little-endian f32 blob. Offsets are relative to the blob and must be
//! contiguous in manifest order.

use super::{EngineError, Result};
use crate::graph::{Layer, LayerKind, ModelGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{self, Write};
use std::path::Path;
use std::sync::OnceLock;

pub const CONTAINER_MAGIC: &[u8; 4] = b"SWWT";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(EngineError::Shape(format!(
                "{} values for weight shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_length: u64,
}

/// Ordered collection of named tensors, e.g. `layer1.0.conv1.weight`.
#[derive(Debug, Default)]
pub struct WeightStore {
    entries: Vec<(String, WeightTensor)>,
    index: HashMap<String, usize>,
    fingerprint: OnceLock<[u8; 8]>,
}

impl Clone for WeightStore {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            index: self.index.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

impl PartialEq for WeightStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: WeightTensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(EngineError::Duplicate(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        self.fingerprint = OnceLock::new();
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Seeded random weights for every tensor the graphs need. Each tensor
    /// is drawn from a stream keyed by `(seed, name)`, so graphs that share
    /// layer names (e.g. encoders of different splits) get identical values.
    pub fn random_for(graphs: &[&ModelGraph], seed: u64) -> Result<Self> {
        let mut store = Self::new();
        for graph in graphs {
            for layer in &graph.layers {
                for (name, shape) in required_tensors(layer) {
                    if let Some(existing) = store.get(&name) {
                        if existing.shape != shape {
                            return Err(EngineError::WeightShape {
                                layer: layer.name.clone(),
                                tensor: name,
                                expected: shape,
                                found: existing.shape.clone(),
                            });
                        }
                        continue;
                    }
                    let tensor = random_tensor(&name, &shape, seed);
                    store.insert(name, tensor)?;
                }
            }
        }
        Ok(store)
    }

    /// Check every tensor `graph` needs is present with the right shape.
    pub fn validate_for(&self, graph: &ModelGraph) -> Result<()> {
        for layer in &graph.layers {
            for (name, shape) in required_tensors(layer) {
                self.expect(&layer.name, &name, &shape)?;
            }
        }
        Ok(())
    }

    /// Copy of the tensors `graph` needs, in graph order.
    pub fn subset_for(&self, graph: &ModelGraph) -> Result<Self> {
        let mut out = Self::new();
        for layer in &graph.layers {
            for (name, shape) in required_tensors(layer) {
                let t = self.expect(&layer.name, &name, &shape)?.clone();
                if out.get(&name).is_none() {
                    out.insert(name, t)?;
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn expect(&self, layer: &str, tensor: &str, shape: &[usize]) -> Result<&WeightTensor> {
        let t = self.get(tensor).ok_or_else(|| EngineError::MissingWeight {
            layer: layer.to_string(),
            tensor: tensor.to_string(),
        })?;
        if t.shape != shape {
            return Err(EngineError::WeightShape {
                layer: layer.to_string(),
                tensor: tensor.to_string(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut offset = 0u64;
        let manifest: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|(name, t)| {
                let byte_length = 4 * t.numel() as u64;
                let e = ManifestEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape.clone(),
                    offset,
                    byte_length,
                };
                offset += byte_length;
                e
            })
            .collect();
        let json = serde_json::to_vec(&manifest).map_err(io::Error::other)?;
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(4096);
        for (_, t) in &self.entries {
            for chunk in t.data.chunks(1024) {
                buf.clear();
                for v in chunk {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.total_values() + 64 * self.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Self, LoadError> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(EngineError::Truncated(format!(
                "{} bytes, header needs 10",
                bytes.len()
            )));
        }
        if &bytes[..4] != CONTAINER_MAGIC {
            return Err(EngineError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CONTAINER_VERSION {
            return Err(EngineError::UnsupportedVersion(version));
        }
        let mlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let blob_start = 10usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| EngineError::Truncated(format!("manifest of {mlen} bytes")))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[10..blob_start])
            .map_err(|e| EngineError::Manifest(e.to_string()))?;
        let blob = &bytes[blob_start..];

        let mut store = Self::new();
        let mut expected_offset = 0u64;
        for e in manifest {
            if e.dtype != "f32" {
                return Err(EngineError::Manifest(format!(
                    "tensor `{}` has dtype `{}`, only f32 is supported",
                    e.name, e.dtype
                )));
            }
            if e.offset != expected_offset {
                return Err(EngineError::Manifest(format!(
                    "tensor `{}` starts at {}, expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| EngineError::Manifest(format!("tensor `{}` too large", e.name)))?;
            if numel.checked_mul(4) != Some(e.byte_length) {
                return Err(EngineError::SizeMismatch(format!(
                    "tensor `{}` of shape {:?} declares {} bytes",
                    e.name, e.shape, e.byte_length
                )));
            }
            let end = e.offset + e.byte_length;
            if end > blob.len() as u64 {
                return Err(EngineError::Truncated(format!(
                    "tensor `{}` ends at {end}, blob has {} bytes",
                    e.name,
                    blob.len()
                )));
            }
            let raw = &blob[e.offset as usize..end as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(EngineError::NonFinite(format!("weight `{}`", e.name)));
            }
            expected_offset = end;
            store.insert(e.name, WeightTensor { shape: e.shape, data })?;
        }
        if expected_offset != blob.len() as u64 {
            return Err(EngineError::SizeMismatch(format!(
                "blob has {} bytes, manifest covers {expected_offset}",
                blob.len()
            )));
        }
        Ok(store)
    }

    /// First 8 bytes of SHA-256 over the serialized container.
    pub fn fingerprint(&self) -> [u8; 8] {
        *self.fingerprint.get_or_init(|| {
            let mut hasher = HashWriter(Sha256::new());
            self.write_to(&mut hasher).expect("hashing cannot fail");
            let digest = hasher.0.finalize();
            digest[..8].try_into().unwrap()
        })
    }

    pub fn fingerprint_hex(&self) -> String {
        self.fingerprint().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// I/O or format failure while loading a container from disk.
#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read weight file: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Format(#[from] EngineError),
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Tensor names and shapes a layer reads, prefixed by the layer name.
pub fn required_tensors(layer: &Layer) -> Vec<(String, Vec<usize>)> {
    let p = &layer.name;
    let mut out = Vec::new();
    let bn = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, c: usize| {
        for t in ["weight", "bias", "running_mean", "running_var"] {
            out.push((format!("{prefix}.{t}"), vec![c]));
        }
    };
    match layer.kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            bias,
            ..
        } => {
            out.push((format!("{p}.weight"), vec![out_channels, in_channels, kernel, kernel]));
            if bias {
                out.push((format!("{p}.bias"), vec![out_channels]));
            }
        }
        LayerKind::ConvTranspose {
            in_channels,
            out_channels,
            kernel,
            bias,
            ..
        } => {
            out.push((format!("{p}.weight"), vec![in_channels, out_channels, kernel, kernel]));
            if bias {
                out.push((format!("{p}.bias"), vec![out_channels]));
            }
        }
        LayerKind::BatchNorm { channels } => bn(&mut out, p.clone(), channels),
        LayerKind::FullyConnected {
            in_features,
            out_features,
        } => {
            out.push((format!("{p}.weight"), vec![out_features, in_features]));
            out.push((format!("{p}.bias"), vec![out_features]));
        }
        LayerKind::ResidualBasicBlock {
            in_channels,
            out_channels,
            projection,
            ..
        } => {
            out.push((format!("{p}.conv1.weight"), vec![out_channels, in_channels, 3, 3]));
            bn(&mut out, format!("{p}.bn1"), out_channels);
            out.push((format!("{p}.conv2.weight"), vec![out_channels, out_channels, 3, 3]));
            bn(&mut out, format!("{p}.bn2"), out_channels);
            if projection {
                out.push((format!("{p}.downsample.0.weight"), vec![out_channels, in_channels, 1, 1]));
                bn(&mut out, format!("{p}.downsample.1"), out_channels);
            }
        }
        _ => {}
    }
    out
}

fn tensor_seed(name: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

fn random_tensor(name: &str, shape: &[usize], seed: u64) -> WeightTensor {
    let mut rng = ChaCha8Rng::from_seed(tensor_seed(name, seed));
    let n: usize = shape.iter().product();
    let (lo, hi) = if name.ends_with("running_var") || (is_bn(name) && name.ends_with(".weight")) {
        (0.9, 1.1)
    } else if is_bn(name) {
        (-0.1, 0.1)
    } else if shape.len() == 1 {
        (-0.01, 0.01)
    } else {
        // He-uniform over the fan-in, i.e. everything but the leading axis;
        // transposed kernels store (in, out, k, k) and get the same
        // treatment. Keeps activations of deep random models from collapsing
        // toward zero.
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in.max(1) as f32).sqrt();
        (-bound, bound)
    };
    let data = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
    WeightTensor {
        shape: shape.to_vec(),
        data,
    }
}

fn is_bn(name: &str) -> bool {
    name.ends_with("running_mean")
        || name.ends_with("running_var")
        || name.contains("bn")
        || name.contains("downsample.1")
}
