//! Transmit and receive halves of one inference, shared by the networked
//! runners and local simulation so both paths are bit-identical for equal
//! seeds.
//!
//! Noise is added on the receive side after the payload is decoded (and
//! dequantized). Inner splits check that the decoded vector is normalized,
//! SP-0 corrupts the raw image without normalization and SP-6 passes the
//! label through untouched.

use crate::channel::{add_awgn, awgn, decode_payload, encode_payload, ChannelError, FeatureVector, PayloadDtype};
use crate::engine::{ops, run_graph, EngineError, Tensor, WeightStore};
use crate::graph::{SplitModel, SplitPoint};
use sha2::{Digest, Sha256};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("label {0} does not fit the 16-bit label payload")]
    LabelOutOfRange(usize),
    #[error("decoder produced no output")]
    EmptyOutput,
}

/// Encoder output ready for the link.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    /// Values before encoding: `z` at inner splits, the image at SP-0, the
    /// label at SP-6.
    pub values: Vec<f32>,
    pub payload: Vec<u8>,
    pub t_m_t: Duration,
}

/// Decoder result for one received payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Reception {
    /// The corrupted values the decoder consumed.
    pub z_hat: Vec<f32>,
    /// Logits, or the echoed label at SP-6.
    pub output: Vec<f32>,
    pub label: usize,
    pub seed: u64,
    pub t_m_r: Duration,
}

/// Seed 0 asks the receiver to choose one.
pub fn resolve_seed(seed: u64) -> u64 {
    if seed != 0 {
        return seed;
    }
    loop {
        let s: u64 = rand::random();
        if s != 0 {
            return s;
        }
    }
}

/// First 8 bytes of SHA-256 over the little-endian f32 values.
pub fn digest_values(values: &[f32]) -> [u8; 8] {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].try_into().unwrap()
}

pub fn transmit(
    model: &SplitModel,
    weights: &WeightStore,
    input: &Tensor,
    dtype: PayloadDtype,
) -> Result<Transmission, PipelineError> {
    let start = Instant::now();
    let out = run_graph(&model.encoder, weights, input)?;
    let t_m_t = start.elapsed();
    let values = out.into_data();
    let payload = if model.split == SplitPoint::Sp6 {
        let label = values[0] as usize;
        let label = u16::try_from(label).map_err(|_| PipelineError::LabelOutOfRange(label))?;
        label.to_le_bytes().to_vec()
    } else {
        encode_payload(&values, dtype)?
    };
    Ok(Transmission {
        values,
        payload,
        t_m_t,
    })
}

/// Decode `payload`, apply noise of std `sigma` drawn from `seed` and run the
/// decoder. `seed` must already be resolved (non-zero when random).
pub fn receive(
    model: &SplitModel,
    weights: &WeightStore,
    payload: &[u8],
    dtype: PayloadDtype,
    sigma: f64,
    seed: u64,
) -> Result<Reception, PipelineError> {
    let start = Instant::now();
    let z_hat = match model.split {
        SplitPoint::Sp6 => {
            if payload.len() != 2 {
                return Err(ChannelError::PayloadLength {
                    expected: 2,
                    found: payload.len(),
                }
                .into());
            }
            vec![u16::from_le_bytes([payload[0], payload[1]]) as f32]
        }
        SplitPoint::Sp0 => add_awgn(&decode_payload(payload, model.n_c, dtype)?, sigma, seed)?,
        _ => {
            let values = decode_payload(payload, model.n_c, dtype)?;
            let tol = match dtype {
                PayloadDtype::F32 => 1e-4,
                PayloadDtype::U8 => {
                    let (lo, hi) = values
                        .iter()
                        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                    1e-4 + (hi - lo) as f64 / 255.0
                }
            };
            let z = FeatureVector::received(values, tol)?;
            awgn(&z, sigma, seed)?.into_values()
        }
    };
    let input = Tensor::new(model.decoder.input_shape, z_hat.clone())?;
    let output = run_graph(&model.decoder, weights, &input)?.into_data();
    let label = if model.split == SplitPoint::Sp6 {
        *output.first().ok_or(PipelineError::EmptyOutput)? as usize
    } else {
        ops::argmax(&output).ok_or(PipelineError::EmptyOutput)?
    };
    Ok(Reception {
        z_hat,
        output,
        label,
        seed,
        t_m_r: start.elapsed(),
    })
}

/// Full local pipeline: encoder, payload encoding, channel, decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRun {
    pub transmission: Transmission,
    pub reception: Reception,
}

impl LocalRun {
    pub fn label(&self) -> usize {
        self.reception.label
    }
}

pub fn simulate_local(
    model: &SplitModel,
    weights: &WeightStore,
    input: &Tensor,
    dtype: PayloadDtype,
    sigma: f64,
    seed: u64,
) -> Result<LocalRun, PipelineError> {
    let transmission = transmit(model, weights, input, dtype)?;
    let reception = receive(model, weights, &transmission.payload, dtype, sigma, resolve_seed(seed))?;
    Ok(LocalRun {
        transmission,
        reception,
    })
}
