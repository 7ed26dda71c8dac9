//! Deterministic f32 forward pass for split ResNet graphs.
//!
//! Dot products accumulate in f64 in a fixed order (input channel outermost,
//! then kernel row, then kernel column), so reruns are bit-identical and the
//! brute-force oracles in the tests can match tightly.

pub mod ops;
mod run;
mod weights;

pub use run::{run_graph, run_layers};
pub use weights::{
    required_tensors, LoadError, WeightStore, WeightTensor, CONTAINER_MAGIC, CONTAINER_VERSION,
};

use crate::graph::{GraphError, TensorShape};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate feature: l2 norm is zero")]
    DegenerateFeature,
    #[error("layer `{layer}`: missing weight tensor `{tensor}`")]
    MissingWeight { layer: String, tensor: String },
    #[error("layer `{layer}`: weight `{tensor}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        layer: String,
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("weight container truncated: {0}")]
    Truncated(String),
    #[error("weight container size mismatch: {0}")]
    SizeMismatch(String),
    #[error("duplicate tensor name `{0}` in weight container")]
    Duplicate(String),
    #[error("bad weight container magic")]
    BadMagic,
    #[error("unsupported weight container version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed weight manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Dense channel-major activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: TensorShape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: TensorShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(EngineError::Shape(format!(
                "{} values for shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: TensorShape::vector(data.len()),
            data,
        }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(EngineError::NonFinite(context.to_string()))
        }
    }

    /// Same data viewed under another shape of equal size.
    pub fn reshape(self, shape: TensorShape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Seeded N(0, 1) input, e.g. a stand-in for a normalized image.
    pub fn random_normal(shape: TensorShape, seed: u64) -> Self {
        let data = crate::channel::GaussianStream::new(seed)
            .take(shape.numel())
            .map(|v| v as f32)
            .collect();
        Self { shape, data }
    }
}
