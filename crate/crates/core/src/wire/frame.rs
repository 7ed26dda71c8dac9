//! Frame layout (all integers little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `SWFR` |
//! | 1 | version |
//! | 1 | message type (1 FEATURES, 2 LABEL, 3 ERROR, 4 HELLO) |
//! | 8 | model fingerprint |
//! | 1 | split id (0..=6) |
//! | 4 | n_c |
//! | 1 | payload dtype (0 f32, 1 u8) |
//! | 8 | noise seed (0: receiver chooses) |
//! | 4 | payload length |
//! | n | payload |
//! | 4 | CRC-32 over header and payload |

use crate::channel::{payload_bits, PayloadDtype};
use crate::graph::SplitPoint;
use std::io::Read;
use thiserror::Error;

pub const FRAME_MAGIC: &[u8; 4] = b"SWFR";
pub const FRAME_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
/// Header plus trailing CRC.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + 4;
pub const DEFAULT_MAX_PAYLOAD: u32 = 16 << 20;
pub const LABEL_PAYLOAD_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Features = 1,
    Label = 2,
    Error = 3,
    Hello = 4,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(MsgType::Features),
            2 => Some(MsgType::Label),
            3 => Some(MsgType::Error),
            4 => Some(MsgType::Hello),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("short frame: need {needed} bytes, have {got}")]
    Short { needed: usize, got: usize },
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("crc mismatch: frame says {expected:08x}, computed {found:08x}")]
    CrcMismatch { expected: u32, found: u32 },
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("unknown split id {0}")]
    UnknownSplit(u8),
    #[error("unknown payload dtype {0}")]
    UnknownDtype(u8),
    #[error("payload of {found} bytes, expected {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error("payload of {0} bytes exceeds the limit")]
    Oversized(u32),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}

impl FrameError {
    /// Stable numeric code carried in ERROR frames.
    pub fn code(&self) -> u16 {
        match self {
            FrameError::Short { .. } => 10,
            FrameError::BadMagic(_) => 11,
            FrameError::UnsupportedVersion(_) => 12,
            FrameError::CrcMismatch { .. } => 13,
            FrameError::UnknownMsgType(_) => 14,
            FrameError::UnknownSplit(_) => 15,
            FrameError::UnknownDtype(_) => 16,
            FrameError::PayloadLength { .. } => 17,
            FrameError::Oversized(_) => 18,
            FrameError::TrailingBytes(_) => 19,
        }
    }

    /// Whether the whole frame was consumed, so the stream is still aligned
    /// on a frame boundary.
    pub fn stream_in_sync(&self) -> bool {
        matches!(
            self,
            FrameError::CrcMismatch { .. }
                | FrameError::UnknownMsgType(_)
                | FrameError::UnknownSplit(_)
                | FrameError::UnknownDtype(_)
                | FrameError::PayloadLength { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub fingerprint: [u8; 8],
    pub split: SplitPoint,
    pub n_c: u32,
    pub dtype: PayloadDtype,
    pub seed: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }
}

/// Payload size a FEATURES frame must carry for `n` values.
pub fn feature_payload_len(split: SplitPoint, n: usize, dtype: PayloadDtype) -> usize {
    (payload_bits(n, dtype, split) / 8) as usize
}

fn check_payload_len(msg: MsgType, split: SplitPoint, n_c: u32, dtype: PayloadDtype, len: usize) -> Result<(), FrameError> {
    let expected = match msg {
        MsgType::Features => Some(feature_payload_len(split, n_c as usize, dtype)),
        MsgType::Label => Some(LABEL_PAYLOAD_LEN),
        MsgType::Hello => Some(0),
        MsgType::Error => None,
    };
    match expected {
        Some(e) if e != len => Err(FrameError::PayloadLength {
            expected: e,
            found: len,
        }),
        None if len < 2 => Err(FrameError::PayloadLength {
            expected: 2,
            found: len,
        }),
        _ => Ok(()),
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.fingerprint);
    out.push(frame.split.index() as u8);
    out.extend_from_slice(&frame.n_c.to_le_bytes());
    out.push(frame.dtype.code());
    out.extend_from_slice(&frame.seed.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Header {
    msg_code: u8,
    fingerprint: [u8; 8],
    split_id: u8,
    n_c: u32,
    dtype_code: u8,
    seed: u64,
    payload_len: u32,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, FrameError> {
    let magic: [u8; 4] = h[..4].try_into().unwrap();
    if &magic != FRAME_MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if h[4] != FRAME_VERSION {
        return Err(FrameError::UnsupportedVersion(h[4]));
    }
    Ok(Header {
        msg_code: h[5],
        fingerprint: h[6..14].try_into().unwrap(),
        split_id: h[14],
        n_c: u32::from_le_bytes(h[15..19].try_into().unwrap()),
        dtype_code: h[19],
        seed: u64::from_le_bytes(h[20..28].try_into().unwrap()),
        payload_len: u32::from_le_bytes(h[28..32].try_into().unwrap()),
    })
}

fn finish(header: Header, raw_header: &[u8], payload: Vec<u8>, crc: u32) -> Result<Frame, FrameError> {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(raw_header);
    hasher.update(&payload);
    let found = hasher.finalize();
    if found != crc {
        return Err(FrameError::CrcMismatch {
            expected: crc,
            found,
        });
    }
    let msg_type = MsgType::from_code(header.msg_code).ok_or(FrameError::UnknownMsgType(header.msg_code))?;
    let split = SplitPoint::from_index(header.split_id as usize).ok_or(FrameError::UnknownSplit(header.split_id))?;
    let dtype = PayloadDtype::from_code(header.dtype_code).ok_or(FrameError::UnknownDtype(header.dtype_code))?;
    check_payload_len(msg_type, split, header.n_c, dtype, payload.len())?;
    Ok(Frame {
        msg_type,
        fingerprint: header.fingerprint,
        split,
        n_c: header.n_c,
        dtype,
        seed: header.seed,
        payload,
    })
}

/// Decode exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    decode_frame_limited(bytes, DEFAULT_MAX_PAYLOAD)
}

pub fn decode_frame_limited(bytes: &[u8], max_payload: u32) -> Result<Frame, FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Short {
            needed: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let raw_header: &[u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().unwrap();
    let header = parse_header(raw_header)?;
    if header.payload_len > max_payload {
        return Err(FrameError::Oversized(header.payload_len));
    }
    let total = FRAME_OVERHEAD + header.payload_len as usize;
    if bytes.len() < total {
        return Err(FrameError::Short {
            needed: total,
            got: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(FrameError::TrailingBytes(bytes.len() - total));
    }
    let payload = bytes[HEADER_LEN..total - 4].to_vec();
    let crc = u32::from_le_bytes(bytes[total - 4..].try_into().unwrap());
    finish(header, raw_header, payload, crc)
}

/// Outcome of reading one frame from a stream.
#[derive(Debug)]
pub enum ReadError {
    /// Clean end of stream before any byte of a new frame.
    Closed,
    Io(std::io::Error),
    Frame(FrameError),
}

/// Read one frame. Magic, version and size limits are checked on the header
/// before the payload is read.
pub fn read_frame<R: Read>(r: &mut R, max_payload: u32) -> Result<Frame, ReadError> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Err(ReadError::Closed),
            Ok(0) => {
                return Err(ReadError::Frame(FrameError::Short {
                    needed: HEADER_LEN,
                    got,
                }))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ReadError::Io(e)),
        }
    }
    let header = parse_header(&h).map_err(ReadError::Frame)?;
    if header.payload_len > max_payload {
        return Err(ReadError::Frame(FrameError::Oversized(header.payload_len)));
    }
    let mut rest = vec![0u8; header.payload_len as usize + 4];
    r.read_exact(&mut rest).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ReadError::Frame(FrameError::Short {
                needed: FRAME_OVERHEAD + header.payload_len as usize,
                got: HEADER_LEN,
            })
        } else {
            ReadError::Io(e)
        }
    })?;
    let crc = u32::from_le_bytes(rest[rest.len() - 4..].try_into().unwrap());
    rest.truncate(rest.len() - 4);
    finish(header, &h, rest, crc).map_err(ReadError::Frame)
}

/// LABEL payload: class index, receiver compute time and a digest of the
/// noisy vector the receiver decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelPayload {
    pub label: u32,
    pub t_m_r_ns: u64,
    pub z_hat_digest: [u8; 8],
}

impl LabelPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LABEL_PAYLOAD_LEN);
        out.extend_from_slice(&self.label.to_le_bytes());
        out.extend_from_slice(&self.t_m_r_ns.to_le_bytes());
        out.extend_from_slice(&self.z_hat_digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() != LABEL_PAYLOAD_LEN {
            return Err(FrameError::PayloadLength {
                expected: LABEL_PAYLOAD_LEN,
                found: bytes.len(),
            });
        }
        Ok(Self {
            label: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
            t_m_r_ns: u64::from_le_bytes(bytes[4..12].try_into().unwrap()),
            z_hat_digest: bytes[12..20].try_into().unwrap(),
        })
    }
}

/// ERROR payload: numeric code and UTF-8 message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorPayload {
    pub code: u16,
    pub message: String,
}

impl ErrorPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.code.to_le_bytes().to_vec();
        out.extend_from_slice(self.message.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < 2 {
            return Err(FrameError::PayloadLength {
                expected: 2,
                found: bytes.len(),
            });
        }
        Ok(Self {
            code: u16::from_le_bytes([bytes[0], bytes[1]]),
            message: String::from_utf8_lossy(&bytes[2..]).into_owned(),
        })
    }
}
