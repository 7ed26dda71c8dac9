use super::frame::{encode_frame, read_frame, ErrorPayload, Frame, LabelPayload, MsgType, ReadError};
use super::pipeline::{digest_values, receive, resolve_seed};
use super::{error_code, WireError, DEFAULT_MAX_PAYLOAD};
use crate::channel::sigma_from_snr;
use crate::engine::WeightStore;
use crate::graph::SplitModel;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    /// Channel SNR applied to every received feature vector. `None` disables
    /// noise.
    pub snr_db: Option<f64>,
    /// Idle read timeout per connection.
    pub timeout: Duration,
    pub max_payload: u32,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            snr_db: None,
            timeout: Duration::from_secs(30),
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

struct State {
    model: Arc<SplitModel>,
    weights: Arc<WeightStore>,
    fingerprint: [u8; 8],
    sigma: f64,
    config: ServerConfig,
    shutdown: AtomicBool,
    served: AtomicU64,
}

/// Receiver runner: one thread per connection, model and weights shared
/// read-only.
pub struct Server {
    listener: TcpListener,
    state: Arc<State>,
}

impl Server {
    pub fn bind(
        addr: impl ToSocketAddrs,
        model: Arc<SplitModel>,
        weights: Arc<WeightStore>,
        config: ServerConfig,
    ) -> Result<Self, WireError> {
        if config.timeout.is_zero() {
            return Err(WireError::Config("timeout must be positive".into()));
        }
        let sigma = match config.snr_db {
            Some(snr) if !snr.is_finite() => {
                return Err(WireError::Config(format!("SNR must be finite, got {snr}")))
            }
            Some(snr) => sigma_from_snr(snr),
            None => 0.0,
        };
        weights
            .validate_for(&model.decoder)
            .map_err(|e| WireError::Config(e.to_string()))?;
        let listener = TcpListener::bind(addr)?;
        let fingerprint = weights.fingerprint();
        Ok(Self {
            listener,
            state: Arc::new(State {
                model,
                weights,
                fingerprint,
                sigma,
                config,
                shutdown: AtomicBool::new(false),
                served: AtomicU64::new(0),
            }),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept connections until shut down.
    pub fn run(self) -> std::io::Result<()> {
        for stream in self.listener.incoming() {
            if self.state.shutdown.load(Ordering::SeqCst) {
                break;
            }
            match stream {
                Ok(s) => {
                    let state = Arc::clone(&self.state);
                    thread::spawn(move || handle_connection(s, &state));
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(_) => thread::sleep(Duration::from_millis(10)),
            }
        }
        Ok(())
    }

    /// Serve on a background thread.
    pub fn spawn(self) -> std::io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let state = Arc::clone(&self.state);
        let thread = thread::spawn(move || {
            let _ = self.run();
        });
        Ok(ServerHandle {
            addr,
            state,
            thread: Some(thread),
        })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    state: Arc<State>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// FEATURES frames answered with a LABEL so far.
    pub fn served(&self) -> u64 {
        self.state.served.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(t) = self.thread.take() {
            self.state.shutdown.store(true, Ordering::SeqCst);
            // wake the accept loop
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn handle_connection(stream: TcpStream, state: &State) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(state.config.timeout));
    let _ = stream.set_write_timeout(Some(state.config.timeout));
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    let mut handshake = false;
    while !state.shutdown.load(Ordering::SeqCst) {
        let reply = match read_frame(&mut reader, state.config.max_payload) {
            Ok(frame) => respond(state, &frame, &mut handshake),
            Err(ReadError::Closed) | Err(ReadError::Io(_)) => break,
            Err(ReadError::Frame(e)) => {
                let reply = error_frame(state, e.code(), &e.to_string());
                if !e.stream_in_sync() {
                    let _ = writer.write_all(&encode_frame(&reply));
                    break;
                }
                reply
            }
        };
        if writer.write_all(&encode_frame(&reply)).is_err() {
            break;
        }
    }
    let _ = writer.shutdown(Shutdown::Both);
}

fn error_frame(state: &State, code: u16, message: &str) -> Frame {
    Frame {
        msg_type: MsgType::Error,
        fingerprint: state.fingerprint,
        split: state.model.split,
        n_c: state.model.n_c as u32,
        dtype: Default::default(),
        seed: 0,
        payload: ErrorPayload {
            code,
            message: message.to_string(),
        }
        .encode(),
    }
}

fn respond(state: &State, frame: &Frame, handshake: &mut bool) -> Frame {
    let model = &state.model;
    let session_matches = || -> Result<(), Frame> {
        if frame.split != model.split {
            return Err(error_frame(
                state,
                error_code::SPLIT_MISMATCH,
                &format!("split mismatch: server runs {}, client sent {}", model.split, frame.split),
            ));
        }
        if frame.n_c as usize != model.n_c {
            return Err(error_frame(
                state,
                error_code::NC_MISMATCH,
                &format!("n_c mismatch: server expects {}, client sent {}", model.n_c, frame.n_c),
            ));
        }
        Ok(())
    };
    match frame.msg_type {
        MsgType::Hello => {
            *handshake = false;
            if frame.fingerprint != state.fingerprint {
                return error_frame(state, error_code::MODEL_MISMATCH, "model mismatch");
            }
            if let Err(e) = session_matches() {
                return e;
            }
            *handshake = true;
            Frame {
                msg_type: MsgType::Hello,
                fingerprint: state.fingerprint,
                split: model.split,
                n_c: model.n_c as u32,
                dtype: frame.dtype,
                seed: 0,
                payload: Vec::new(),
            }
        }
        MsgType::Features => {
            if !*handshake {
                return error_frame(state, error_code::HANDSHAKE_REQUIRED, "HELLO required before FEATURES");
            }
            if frame.fingerprint != state.fingerprint {
                return error_frame(state, error_code::MODEL_MISMATCH, "model mismatch");
            }
            if let Err(e) = session_matches() {
                return e;
            }
            let seed = resolve_seed(frame.seed);
            match receive(model, &state.weights, &frame.payload, frame.dtype, state.sigma, seed) {
                Ok(rec) => {
                    state.served.fetch_add(1, Ordering::SeqCst);
                    Frame {
                        msg_type: MsgType::Label,
                        fingerprint: state.fingerprint,
                        split: model.split,
                        n_c: model.n_c as u32,
                        dtype: frame.dtype,
                        seed,
                        payload: LabelPayload {
                            label: rec.label as u32,
                            t_m_r_ns: rec.t_m_r.as_nanos().min(u64::MAX as u128) as u64,
                            z_hat_digest: digest_values(&rec.z_hat),
                        }
                        .encode(),
                    }
                }
                Err(e) => error_frame(state, error_code::INFERENCE_FAILED, &e.to_string()),
            }
        }
        other => error_frame(
            state,
            error_code::UNEXPECTED_MESSAGE,
            &format!("unexpected {other:?} frame from client"),
        ),
    }
}
