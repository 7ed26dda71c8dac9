//! Split inference for task-oriented communication.
//!
//! Build basic-block ResNet graphs, cut them at one of seven split points
//! with a learned compression/decompression pair around the link, run the
//! halves on CPU with a simulated AWGN channel in between, account FLOPs and
//! parameters per side, evaluate the latency model and pick the cheapest
//! `(split, n_c)` that meets an accuracy floor. The [`wire`] module runs the
//! two halves in separate processes over TCP.

pub mod channel;
pub mod cost;
pub mod engine;
pub mod graph;
pub mod planner;
pub mod wire;

pub use channel::{ChannelProfile, FeatureVector, PayloadDtype};
pub use cost::{CostReport, DeviceProfile};
pub use engine::{Tensor, WeightStore};
pub use graph::{apply_split, build_resnet, ModelGraph, SplitModel, SplitPoint, TensorShape, Variant};
pub use planner::{AccuracyTable, PlanResult};
