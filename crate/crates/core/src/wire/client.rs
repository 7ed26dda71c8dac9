use super::frame::{encode_frame, read_frame, ErrorPayload, Frame, LabelPayload, MsgType, FRAME_OVERHEAD};
use super::pipeline::transmit;
use super::{SessionConfig, WireError, DEFAULT_MAX_PAYLOAD};
use crate::channel::{payload_bits, ChannelProfile};
use crate::cost::{total_task_time, CostReport, DeviceProfile};
use crate::engine::{Tensor, WeightStore};
use crate::graph::{count_flops, FlopReport, SplitModel};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Measured timings of one networked inference next to the latency model's
/// prediction. Times are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub t_m_t: f64,
    /// Receiver compute time as reported by the server.
    pub t_m_r: f64,
    /// Round trip minus the server's compute time.
    pub transfer: f64,
    pub round_trip: f64,
    pub payload_bytes: usize,
    pub payload_bits: u64,
    /// Framing bytes per message, not part of the payload.
    pub frame_overhead_bytes: usize,
    pub predicted: Option<CostReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReply {
    pub label: usize,
    /// Noise seed the receiver actually used.
    pub seed: u64,
    pub z_hat_digest: [u8; 8],
    pub timing: TimingReport,
}

/// Transmitter runner holding one connection; reusable across requests.
pub struct EdgeClient {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    model: Arc<SplitModel>,
    weights: Arc<WeightStore>,
    fingerprint: [u8; 8],
    config: SessionConfig,
    flops: FlopReport,
    prediction: Option<(DeviceProfile, DeviceProfile, ChannelProfile)>,
}

impl EdgeClient {
    /// Connect and perform the HELLO handshake.
    pub fn connect(
        addr: impl ToSocketAddrs,
        model: Arc<SplitModel>,
        weights: Arc<WeightStore>,
        config: SessionConfig,
    ) -> Result<Self, WireError> {
        weights
            .validate_for(&model.encoder)
            .map_err(|e| WireError::Config(e.to_string()))?;
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let mut last = None;
        let mut stream = None;
        for a in &addrs {
            match TcpStream::connect_timeout(a, config.timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        let stream = match (stream, last) {
            (Some(s), _) => s,
            (None, Some(e)) if is_timeout(&e) => return Err(WireError::Timeout(config.timeout)),
            (None, Some(e)) => return Err(WireError::Io(e)),
            (None, None) => {
                return Err(WireError::Config("address resolved to nothing".into()))
            }
        };
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(config.timeout))?;
        stream.set_write_timeout(Some(config.timeout))?;
        let reader = BufReader::new(stream.try_clone()?);
        let flops = count_flops(model.as_ref());
        let mut client = Self {
            writer: stream,
            reader,
            fingerprint: weights.fingerprint(),
            model,
            weights,
            config,
            flops,
            prediction: None,
        };
        client.hello()?;
        Ok(client)
    }

    /// Attach device and link parameters so replies carry a predicted cost.
    pub fn with_prediction(mut self, dev_t: DeviceProfile, dev_r: DeviceProfile, channel: ChannelProfile) -> Self {
        self.prediction = Some((dev_t, dev_r, channel));
        self
    }

    pub fn fingerprint(&self) -> [u8; 8] {
        self.fingerprint
    }

    fn frame(&self, msg_type: MsgType, seed: u64, payload: Vec<u8>) -> Frame {
        Frame {
            msg_type,
            fingerprint: self.fingerprint,
            split: self.model.split,
            n_c: self.model.n_c as u32,
            dtype: self.config.dtype,
            seed,
            payload,
        }
    }

    fn hello(&mut self) -> Result<(), WireError> {
        let reply = self.exchange(&self.frame(MsgType::Hello, 0, Vec::new()))?;
        match reply.msg_type {
            MsgType::Hello => Ok(()),
            other => Err(WireError::Unexpected(other)),
        }
    }

    /// Send a frame and wait for the reply. ERROR replies become
    /// [`WireError::Remote`].
    pub fn exchange(&mut self, frame: &Frame) -> Result<Frame, WireError> {
        self.send_raw(&encode_frame(frame))
    }

    /// Write arbitrary bytes and read one reply frame.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<Frame, WireError> {
        let timeout = self.config.timeout;
        self.writer.write_all(bytes).map_err(|e| io_error(e, timeout))?;
        let reply = read_frame(&mut self.reader, DEFAULT_MAX_PAYLOAD).map_err(|e| match e {
            super::ReadError::Io(e) => io_error(e, timeout),
            other => other.into(),
        })?;
        if reply.msg_type == MsgType::Error {
            let e = ErrorPayload::decode(&reply.payload)?;
            return Err(WireError::Remote {
                code: e.code,
                message: e.message,
            });
        }
        Ok(reply)
    }

    /// Run the encoder on `input`, send the payload and wait for the label.
    pub fn infer(&mut self, input: &Tensor, seed: u64) -> Result<InferenceReply, WireError> {
        let tx = transmit(&self.model, &self.weights, input, self.config.dtype)?;
        let payload_bytes = tx.payload.len();
        let frame = self.frame(MsgType::Features, seed, tx.payload);
        let start = Instant::now();
        let reply = self.exchange(&frame)?;
        let round_trip = start.elapsed();
        if reply.msg_type != MsgType::Label {
            return Err(WireError::Unexpected(reply.msg_type));
        }
        let label = LabelPayload::decode(&reply.payload)?;
        let t_m_r = Duration::from_nanos(label.t_m_r_ns);
        let bits = payload_bits(self.model.n_c, self.config.dtype, self.model.split);
        let predicted = self
            .prediction
            .map(|(dt, dr, ch)| total_task_time(&self.flops, dt, dr, bits, &ch));
        Ok(InferenceReply {
            label: label.label as usize,
            seed: reply.seed,
            z_hat_digest: label.z_hat_digest,
            timing: TimingReport {
                t_m_t: tx.t_m_t.as_secs_f64(),
                t_m_r: t_m_r.as_secs_f64(),
                transfer: round_trip.saturating_sub(t_m_r).as_secs_f64(),
                round_trip: round_trip.as_secs_f64(),
                payload_bytes,
                payload_bits: bits,
                frame_overhead_bytes: FRAME_OVERHEAD,
                predicted,
            },
        })
    }
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(e.kind(), ErrorKind::TimedOut | ErrorKind::WouldBlock)
}

fn io_error(e: std::io::Error, timeout: Duration) -> WireError {
    if is_timeout(&e) {
        WireError::Timeout(timeout)
    } else {
        WireError::Io(e)
    }
}
