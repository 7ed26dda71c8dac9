//! Networked split inference over TCP.
//!
//! The edge side runs the encoder and sends a FEATURES frame; the cloud side
//! decodes it, applies the simulated AWGN channel, runs the decoder and
//! answers with a LABEL frame. Each connection starts with a HELLO exchange
//! that checks both ends hold the same weights, split point and `n_c`.

mod client;
mod frame;
pub mod pipeline;
mod server;

pub use client::{EdgeClient, InferenceReply, TimingReport};
pub use frame::{
    decode_frame, decode_frame_limited, encode_frame, feature_payload_len, read_frame,
    ErrorPayload, Frame, FrameError, LabelPayload, MsgType, ReadError, DEFAULT_MAX_PAYLOAD,
    FRAME_MAGIC, FRAME_OVERHEAD, FRAME_VERSION, HEADER_LEN, LABEL_PAYLOAD_LEN,
};
pub use pipeline::{digest_values, receive, resolve_seed, simulate_local, transmit, LocalRun, PipelineError, Reception, Transmission};
pub use server::{Server, ServerConfig, ServerHandle};

use std::io;
use std::time::Duration;
use thiserror::Error;

/// Codes carried in ERROR frames.
pub mod error_code {
    pub const MODEL_MISMATCH: u16 = 1;
    pub const SPLIT_MISMATCH: u16 = 2;
    pub const NC_MISMATCH: u16 = 3;
    pub const HANDSHAKE_REQUIRED: u16 = 4;
    pub const UNEXPECTED_MESSAGE: u16 = 5;
    pub const INFERENCE_FAILED: u16 = 6;
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("connection closed by peer")]
    Closed,
    #[error("malformed frame: {0}")]
    Frame(#[from] FrameError),
    #[error("peer reported error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("unexpected {0:?} frame")]
    Unexpected(MsgType),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invalid session configuration: {0}")]
    Config(String),
}

impl WireError {
    /// Transport-level failure (as opposed to a protocol violation).
    pub fn is_io(&self) -> bool {
        matches!(self, WireError::Io(_) | WireError::Timeout(_) | WireError::Closed)
    }
}

impl From<ReadError> for WireError {
    fn from(e: ReadError) -> Self {
        match e {
            ReadError::Closed => WireError::Closed,
            ReadError::Io(e) => WireError::Io(e),
            ReadError::Frame(f) => WireError::Frame(f),
        }
    }
}

/// Client-side session parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub dtype: crate::channel::PayloadDtype,
    pub timeout: Duration,
}

impl SessionConfig {
    pub fn new(dtype: crate::channel::PayloadDtype, timeout: Duration) -> Result<Self, WireError> {
        if timeout.is_zero() {
            return Err(WireError::Config("timeout must be positive".into()));
        }
        Ok(Self { dtype, timeout })
    }
}
