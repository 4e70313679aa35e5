//! Streaming masking service over TCP.
//!
//! Each connection gets its own [`Session`], which wraps a [`MaskEngine`]:
//! the service makes exactly the decisions an offline run makes for the
//! same frames and detections. Malformed input is answered with an ERROR
//! message and the connection is closed; the server itself keeps running.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;

use thiserror::Error;

use crate::geom::Detection;
use crate::image::GrayImage;
use crate::pipeline::{EngineConfig, MaskEngine, PipelineError};
use crate::temporal::HoldMode;
use crate::wire::{
    read_message, write_message, ConfigPayload, FramePayload, MaskedPayload, MsgType, WireBox, WireError,
    WireMessage,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("server replied with an error: {0}")]
    Remote(String),
    #[error("unexpected {0:?} reply")]
    UnexpectedReply(MsgType),
    #[error("connection closed by peer")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reply to one client message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub message: WireMessage,
    /// The connection must be closed after sending the reply.
    pub close: bool,
}

impl Reply {
    fn ok(message: WireMessage) -> Self {
        Self { message, close: false }
    }

    fn fatal(text: impl Into<String>) -> Self {
        Self {
            message: WireMessage::error(text),
            close: true,
        }
    }
}

pub fn config_to_payload(cfg: &EngineConfig) -> ConfigPayload {
    let milli = |v: f64| (v * 1000.0).round().clamp(0.0, 1000.0) as u16;
    ConfigPayload {
        conf_milli: milli(cfg.conf_thr),
        mode: cfg.hold.mode,
        hold_frames: cfg.hold.hold_frames,
        ssim_threshold_milli: milli(cfg.hold.ssim_threshold),
        ssim_downsample: cfg.hold.ssim_params.downsample.min(255) as u8,
    }
}

/// Applies a CONFIG payload on top of `base`; the mask style and the
/// remaining SSIM constants are kept.
pub fn apply_config(base: &EngineConfig, p: &ConfigPayload) -> EngineConfig {
    let mut cfg = *base;
    cfg.conf_thr = f64::from(p.conf_milli) / 1000.0;
    cfg.hold.mode = p.mode;
    cfg.hold.hold_frames = p.hold_frames;
    cfg.hold.ssim_threshold = f64::from(p.ssim_threshold_milli) / 1000.0;
    cfg.hold.ssim_params.downsample = usize::from(p.ssim_downsample);
    cfg
}

/// Protocol state of one connection, independent of any socket.
#[derive(Debug, Clone)]
pub struct Session {
    engine: MaskEngine,
}

impl Session {
    pub fn new(cfg: EngineConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            engine: MaskEngine::new(cfg)?,
        })
    }

    pub fn engine(&self) -> &MaskEngine {
        &self.engine
    }

    pub fn handle(&mut self, msg: &WireMessage) -> Reply {
        match msg.msg_type {
            MsgType::Frame => self.handle_frame(&msg.payload),
            MsgType::Config => self.handle_config(&msg.payload),
            other => Reply::fatal(format!("clients may not send {other:?} messages")),
        }
    }

    fn handle_frame(&mut self, payload: &[u8]) -> Reply {
        let frame = match FramePayload::decode(payload) {
            Ok(f) => f,
            Err(e) => return Reply::fatal(e.to_string()),
        };
        let dets = match frame.to_detections() {
            Ok(d) => d,
            Err(e) => return Reply::fatal(e.to_string()),
        };
        let masked = match self.engine.process(u64::from(frame.frame_index), &frame.image, &dets) {
            Ok(m) => m,
            Err(e) => return Reply::fatal(e.to_string()),
        };
        let reply = MaskedPayload {
            frame_index: frame.frame_index,
            source: masked.decision.source,
            boxes: masked
                .decision
                .boxes
                .iter()
                .map(|b| WireBox::from_bbox(&b.bbox, b.category))
                .collect(),
            image: masked.image,
        };
        match reply.encode() {
            Ok(bytes) => Reply::ok(WireMessage::new(MsgType::Masked, bytes)),
            Err(e) => Reply::fatal(e.to_string()),
        }
    }

    fn handle_config(&mut self, payload: &[u8]) -> Reply {
        let p = match ConfigPayload::decode(payload) {
            Ok(p) => p,
            Err(e) => return Reply::fatal(e.to_string()),
        };
        let cfg = apply_config(self.engine.config(), &p);
        if let Err(e) = self.engine.reconfigure(cfg) {
            return Reply::fatal(e.to_string());
        }
        Reply::ok(WireMessage::new(
            MsgType::Config,
            config_to_payload(self.engine.config()).encode(),
        ))
    }
}

/// Serves one connection until the peer hangs up or sends something
/// malformed. Returns the number of frames masked.
pub fn serve_connection<S: Read + Write>(stream: S, cfg: EngineConfig) -> Result<u64, ServiceError> {
    let mut session = Session::new(cfg)?;
    let mut stream = stream;
    let mut frames = 0u64;
    loop {
        let msg = match read_message(&mut stream) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(frames),
            Err(WireError::Io(e)) => return Err(e.into()),
            Err(e) => {
                // Best effort: the peer may already be gone.
                let _ = write_message(&mut stream, &WireMessage::error(e.to_string()));
                return Err(e.into());
            }
        };
        let reply = session.handle(&msg);
        if reply.message.msg_type == MsgType::Masked {
            frames += 1;
        }
        write_message(&mut stream, &reply.message)?;
        if reply.close {
            let text = String::from_utf8_lossy(&reply.message.payload).into_owned();
            return Err(ServiceError::Remote(text));
        }
    }
}

/// Buffered adaptor so the connection loop sees a single Read + Write.
struct Duplex {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Read for Duplex {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.reader.read(buf)
    }
}

impl Write for Duplex {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.writer.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

fn duplex(stream: TcpStream) -> io::Result<Duplex> {
    stream.set_nodelay(true)?;
    Ok(Duplex {
        reader: BufReader::with_capacity(1 << 16, stream.try_clone()?),
        writer: BufWriter::with_capacity(1 << 16, stream),
    })
}

pub struct Server {
    listener: TcpListener,
    cfg: EngineConfig,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, cfg: EngineConfig) -> Result<Self, ServiceError> {
        cfg.validate()?;
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            cfg,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections forever, one thread each.
    pub fn run(self) -> io::Result<()> {
        for conn in self.listener.incoming() {
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let cfg = self.cfg;
            thread::spawn(move || {
                let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_else(|_| "?".into());
                log::info!("{peer}: connected");
                let result = duplex(stream).map_err(ServiceError::from).and_then(|d| serve_connection(d, cfg));
                match result {
                    Ok(n) => log::info!("{peer}: closed after {n} frames"),
                    Err(e) => log::warn!("{peer}: {e}"),
                }
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> thread::JoinHandle<io::Result<()>> {
        thread::spawn(move || self.run())
    }
}

/// Blocking client for one masking stream.
pub struct Client {
    io: Duplex,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ServiceError> {
        Ok(Self {
            io: duplex(TcpStream::connect(addr)?)?,
        })
    }

    fn roundtrip(&mut self, msg: &WireMessage, expect: MsgType) -> Result<Vec<u8>, ServiceError> {
        write_message(&mut self.io, msg)?;
        let reply = read_message(&mut self.io)?.ok_or(ServiceError::Closed)?;
        match reply.msg_type {
            t if t == expect => Ok(reply.payload),
            MsgType::Error => Err(ServiceError::Remote(String::from_utf8_lossy(&reply.payload).into_owned())),
            t => Err(ServiceError::UnexpectedReply(t)),
        }
    }

    pub fn configure(&mut self, p: &ConfigPayload) -> Result<ConfigPayload, ServiceError> {
        let bytes = self.roundtrip(&WireMessage::new(MsgType::Config, p.encode()), MsgType::Config)?;
        Ok(ConfigPayload::decode(&bytes)?)
    }

    pub fn mask(&mut self, frame_index: u32, image: &GrayImage, dets: &[Detection]) -> Result<MaskedPayload, ServiceError> {
        let payload = FramePayload::new(frame_index, image.clone(), dets).encode()?;
        let bytes = self.roundtrip(&WireMessage::new(MsgType::Frame, payload), MsgType::Masked)?;
        Ok(MaskedPayload::decode(&bytes)?)
    }
}

/// Parses a hold mode name for CONFIG messages built from text.
pub fn mode_from_str(s: &str) -> Option<HoldMode> {
    s.parse().ok()
}
