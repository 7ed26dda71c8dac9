//! AWGN channel model: noise level from SNR, power normalization of the
//! feature vector, seeded Gaussian noise, 8-bit payload quantization and
//! payload size accounting.
//!
//! Noise is reproducible across platforms. Standard normals come from
//! Box-Muller over a counter-based SplitMix64 stream: word `i` of seed `s` is
//! `mix(s + (i + 1) * 0x9E3779B97F4A7C15)`, mapped to a uniform in `(0, 1]` as
//! `((word >> 11) + 1) * 2^-53`. Uniforms `2p` and `2p + 1` form pair `p`;
//! even outputs take the cosine branch, odd outputs the sine branch.

use crate::graph::SplitPoint;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("degenerate feature: l2 norm is zero")]
    DegenerateFeature,
    #[error("feature vector is not normalized (norm {norm:.6}, expected {expected:.6})")]
    NotNormalized { norm: f64, expected: f64 },
    #[error("noise sigma must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("transmission rate must be positive, got {0}")]
    InvalidRate(f64),
    #[error("SNR must be finite, got {0}")]
    InvalidSnr(f64),
    #[error("payload of {found} bytes, expected {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error("non-finite value in feature vector")]
    NonFinite,
    #[error("unknown payload dtype `{0}` (expected f32 or u8)")]
    UnknownDtype(String),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// Noise standard deviation for a unit-power signal: `1 / sqrt(10^(snr/10))`.
pub fn sigma_from_snr(snr_db: f64) -> f64 {
    1.0 / 10f64.powf(snr_db / 10.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadDtype {
    #[default]
    F32,
    U8,
}

impl PayloadDtype {
    pub fn code(self) -> u8 {
        match self {
            PayloadDtype::F32 => 0,
            PayloadDtype::U8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PayloadDtype::F32),
            1 => Some(PayloadDtype::U8),
            _ => None,
        }
    }
}

impl fmt::Display for PayloadDtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadDtype::F32 => "f32",
            PayloadDtype::U8 => "u8",
        })
    }
}

impl FromStr for PayloadDtype {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(PayloadDtype::F32),
            "u8" => Ok(PayloadDtype::U8),
            _ => Err(ChannelError::UnknownDtype(s.to_string())),
        }
    }
}

/// Link parameters: SNR in dB, rate in bits per second, payload encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub snr_db: f64,
    pub rate_r: f64,
    pub payload_dtype: PayloadDtype,
}

impl ChannelProfile {
    pub fn new(snr_db: f64, rate_r: f64, payload_dtype: PayloadDtype) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(ChannelError::InvalidSnr(snr_db));
        }
        if !(rate_r > 0.0 && rate_r.is_finite()) {
            return Err(ChannelError::InvalidRate(rate_r));
        }
        Ok(Self {
            snr_db,
            rate_r,
            payload_dtype,
        })
    }

    pub fn sigma(&self) -> f64 {
        sigma_from_snr(self.snr_db)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureState {
    Raw,
    Normalized,
    Noisy,
}

/// The transmitted representation `z`, or its corrupted copy.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f32>,
    state: FeatureState,
}

impl FeatureVector {
    pub fn raw(values: Vec<f32>) -> Self {
        Self {
            values,
            state: FeatureState::Raw,
        }
    }

    /// Accept `values` as normalized if their norm is within `rel_tol` of
    /// `sqrt(n)`. Used on the receive side after transport.
    pub fn received(values: Vec<f32>, rel_tol: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ChannelError::NonFinite);
        }
        let norm = l2_norm(&values);
        let expected = (values.len() as f64).sqrt();
        if (norm - expected).abs() > rel_tol * expected {
            return Err(ChannelError::NotNormalized { norm, expected });
        }
        Ok(Self {
            values,
            state: FeatureState::Normalized,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn n_c(&self) -> usize {
        self.values.len()
    }

    pub fn state(&self) -> FeatureState {
        self.state
    }
}

fn l2_norm(x: &[f32]) -> f64 {
    x.iter().fold(0f64, |acc, &v| acc + v as f64 * v as f64).sqrt()
}

/// `z / ||z|| * sqrt(n_c)`, giving unit average power per entry.
pub fn normalize_and_scale(z: &FeatureVector) -> Result<FeatureVector> {
    if z.values.iter().any(|v| !v.is_finite()) {
        return Err(ChannelError::NonFinite);
    }
    let values = crate::engine::ops::normalize_scale(&z.values)
        .map_err(|_| ChannelError::DegenerateFeature)?;
    Ok(FeatureVector {
        values,
        state: FeatureState::Normalized,
    })
}

/// `z + n` with `n ~ N(0, sigma^2 I)` drawn from `seed`. The input must be
/// normalized; `sigma = 0` returns `z` unchanged.
pub fn awgn(z: &FeatureVector, sigma: f64, seed: u64) -> Result<FeatureVector> {
    if z.state != FeatureState::Normalized {
        let norm = l2_norm(&z.values);
        return Err(ChannelError::NotNormalized {
            norm,
            expected: (z.values.len() as f64).sqrt(),
        });
    }
    Ok(FeatureVector {
        values: add_awgn(&z.values, sigma, seed)?,
        state: FeatureState::Noisy,
    })
}

/// Noise on an arbitrary real vector, without the normalization check.
pub fn add_awgn(values: &[f32], sigma: f64, seed: u64) -> Result<Vec<f32>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ChannelError::InvalidSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(values.to_vec());
    }
    Ok(values
        .iter()
        .zip(GaussianStream::new(seed))
        .map(|(&v, n)| (v as f64 + sigma * n) as f32)
        .collect())
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in `(0, 1]` for counter `i` of `seed`.
pub fn uniform_at(seed: u64, i: u64) -> f64 {
    let word = splitmix(seed.wrapping_add(i.wrapping_add(1).wrapping_mul(GOLDEN)));
    ((word >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal number `i` of `seed`.
pub fn gaussian_at(seed: u64, i: u64) -> f64 {
    let pair = i / 2;
    let u1 = uniform_at(seed, 2 * pair);
    let u2 = uniform_at(seed, 2 * pair + 1);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    if i.is_multiple_of(2) {
        r * theta.cos()
    } else {
        r * theta.sin()
    }
}

/// Endless iterator of standard normals, equal to `gaussian_at(seed, 0..)`.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    seed: u64,
    next: u64,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            next: 0,
            spare: None,
        }
    }
}

impl Iterator for GaussianStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        if let Some(v) = self.spare.take() {
            self.next += 1;
            return Some(v);
        }
        let u1 = uniform_at(self.seed, self.next);
        let u2 = uniform_at(self.seed, self.next + 1);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        self.next += 1;
        Some(r * theta.cos())
    }
}

/// 8-bit affine quantization: `x ~ (q - zero_point) * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPayload {
    pub bytes: Vec<u8>,
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantizedPayload {
    /// Width of one quantization bin.
    pub fn bin_width(&self) -> f32 {
        self.scale
    }
}

pub fn quantize(values: &[f32]) -> Result<QuantizedPayload> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ChannelError::NonFinite);
    }
    let (min, max) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() || min == max {
        // Constant vectors get a one-step code that reproduces them exactly.
        let c = if values.is_empty() { 0.0 } else { min };
        let (scale, zero_point, q) = if c > 0.0 {
            (c, 0, 1u8)
        } else if c < 0.0 {
            (-c, 1, 0u8)
        } else {
            (0.0, 0, 0u8)
        };
        return Ok(QuantizedPayload {
            bytes: vec![q; values.len()],
            scale,
            zero_point,
        });
    }
    let scale = ((max as f64 - min as f64) / 255.0) as f32;
    let s = scale as f64;
    // The zero point is not confined to the code range, so ranges that
    // exclude 0 keep their full resolution; error stays within half a bin.
    let zero_point = (-(min as f64) / s).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32;
    let bytes = values
        .iter()
        .map(|&v| ((v as f64 / s).round() + zero_point as f64).clamp(0.0, 255.0) as u8)
        .collect();
    Ok(QuantizedPayload {
        bytes,
        scale,
        zero_point,
    })
}

pub fn dequantize(q: &QuantizedPayload) -> Vec<f32> {
    let s = q.scale as f64;
    q.bytes
        .iter()
        .map(|&b| ((b as i32 - q.zero_point) as f64 * s) as f32)
        .collect()
}

/// Bits on the link for one inference (the semantic payload, excluding
/// framing). `n` is the number of transmitted values: `n_c` at inner
/// splits, the image size at SP-0. SP-6 sends one 16-bit class index.
pub fn payload_bits(n: usize, dtype: PayloadDtype, split: SplitPoint) -> u64 {
    if split == SplitPoint::Sp6 {
        return 16;
    }
    match dtype {
        PayloadDtype::F32 => 32 * n as u64,
        PayloadDtype::U8 => 8 * n as u64 + 64,
    }
}

/// Serialize a real payload: little-endian f32s, or u8 codes followed by
/// the f32 scale and i32 zero point.
pub fn encode_payload(values: &[f32], dtype: PayloadDtype) -> Result<Vec<u8>> {
    match dtype {
        PayloadDtype::F32 => Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect()),
        PayloadDtype::U8 => {
            let q = quantize(values)?;
            let mut out = q.bytes;
            out.extend_from_slice(&q.scale.to_le_bytes());
            out.extend_from_slice(&q.zero_point.to_le_bytes());
            Ok(out)
        }
    }
}

/// Inverse of [`encode_payload`] for `n` values.
pub fn decode_payload(bytes: &[u8], n: usize, dtype: PayloadDtype) -> Result<Vec<f32>> {
    let expected = payload_bits(n, dtype, SplitPoint::Sp1) as usize / 8;
    if bytes.len() != expected {
        return Err(ChannelError::PayloadLength {
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f32> = match dtype {
        PayloadDtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        PayloadDtype::U8 => {
            let side = &bytes[n..];
            let q = QuantizedPayload {
                bytes: bytes[..n].to_vec(),
                scale: f32::from_le_bytes(side[..4].try_into().unwrap()),
                zero_point: i32::from_le_bytes(side[4..8].try_into().unwrap()),
            };
            if !q.scale.is_finite() || q.scale < 0.0 {
                return Err(ChannelError::NonFinite);
            }
            dequantize(&q)
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ChannelError::NonFinite);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_examples() {
        assert!((sigma_from_snr(0.0) - 1.0).abs() < 1e-12);
        assert!((sigma_from_snr(10.0) - 0.316228).abs() < 1e-6);
        assert!((sigma_from_snr(20.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let z = normalize_and_scale(&FeatureVector::raw(vec![3.0, 4.0])).unwrap();
        assert!((z.values()[0] - 0.8485281).abs() < 1e-6);
        assert!((z.values()[1] - 1.1313708).abs() < 1e-6);
        assert_eq!(z.state(), FeatureState::Normalized);
        assert_eq!(
            normalize_and_scale(&FeatureVector::raw(vec![0.0; 4])),
            Err(ChannelError::DegenerateFeature)
        );
    }

    #[test]
    fn awgn_contract() {
        let z = normalize_and_scale(&FeatureVector::raw(vec![1.0, -2.0, 0.5])).unwrap();
        assert_eq!(awgn(&z, 0.0, 9).unwrap().values(), z.values());
        assert_eq!(awgn(&z, 0.3, 9).unwrap(), awgn(&z, 0.3, 9).unwrap());
        assert_ne!(awgn(&z, 0.3, 9).unwrap(), awgn(&z, 0.3, 10).unwrap());
        assert_eq!(awgn(&z, -0.1, 9), Err(ChannelError::InvalidSigma(-0.1)));
        let raw = FeatureVector::raw(vec![1.0, 2.0]);
        assert!(matches!(awgn(&raw, 0.1, 0), Err(ChannelError::NotNormalized { .. })));
    }

    #[test]
    fn stream_matches_indexed_draws() {
        let s: Vec<f64> = GaussianStream::new(42).take(9).collect();
        for (i, v) in s.iter().enumerate() {
            assert_eq!(*v, gaussian_at(42, i as u64));
        }
        assert!((0..1000).all(|i| {
            let u = uniform_at(7, i);
            u > 0.0 && u <= 1.0
        }));
    }

    #[test]
    fn quantization_examples() {
        for c in [0.7f32, -2.5, 0.0] {
            let q = quantize(&[c; 5]).unwrap();
            assert_eq!(dequantize(&q), vec![c; 5]);
        }
        let lin: Vec<f32> = (0..256).map(|i| -1.0 + 2.0 * i as f32 / 255.0).collect();
        let q = quantize(&lin).unwrap();
        let back = dequantize(&q);
        let err = lin.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(err <= 2.0 / 255.0 + 1e-6);

        let shifted: Vec<f32> = (0..50).map(|i| 3.0 + i as f32 * 0.1).collect();
        let q = quantize(&shifted).unwrap();
        assert!(q.zero_point < 0);
        let back = dequantize(&q);
        assert!(shifted.iter().zip(&back).all(|(a, b)| (a - b).abs() <= q.scale * 0.5 + 1e-6));
    }

    #[test]
    fn payload_bits_examples() {
        assert_eq!(payload_bits(1024, PayloadDtype::F32, SplitPoint::Sp2), 32_768);
        assert_eq!(payload_bits(16, PayloadDtype::U8, SplitPoint::Sp4), 128 + 64);
        assert_eq!(payload_bits(1, PayloadDtype::F32, SplitPoint::Sp6), 16);
        assert_eq!(payload_bits(3072, PayloadDtype::F32, SplitPoint::Sp0), 98_304);
    }

    #[test]
    fn payload_codec_round_trip() {
        let v = vec![0.25f32, -1.5, 3.0, 0.0];
        let f = encode_payload(&v, PayloadDtype::F32).unwrap();
        assert_eq!(f.len(), 16);
        assert_eq!(decode_payload(&f, 4, PayloadDtype::F32).unwrap(), v);
        let u = encode_payload(&v, PayloadDtype::U8).unwrap();
        assert_eq!(u.len(), 12);
        let back = decode_payload(&u, 4, PayloadDtype::U8).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| (a - b).abs() <= 4.5 / 255.0 + 1e-6));
        assert!(decode_payload(&u[..11], 4, PayloadDtype::U8).is_err());
    }
}
