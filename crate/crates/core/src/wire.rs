//! Length-prefixed binary protocol of the masking service.
//!
//! Every message is a 10-byte header followed by the payload:
//!
//! ```text
//! 0..4   magic "USMK"
//! 4      version (1)
//! 5      type: 1 FRAME, 2 MASKED, 3 ERROR, 4 CONFIG
//! 6..10  payload length, big-endian u32, at most 16 MiB
//! ```
//!
//! All integers are big-endian. Payload layouts:
//!
//! ```text
//! FRAME   frame_index u32, width u16, height u16, n_dets u16,
//!         n_dets x (x0 u16, y0 u16, x1 u16, y1 u16, category u8, conf_milli u16),
//!         width*height pixel bytes
//! MASKED  frame_index u32, width u16, height u16, source u8, n_boxes u16,
//!         n_boxes x (x0 u16, y0 u16, x1 u16, y1 u16, category u8),
//!         width*height pixel bytes
//! CONFIG  conf_milli u16, mode u8, hold_frames u32, ssim_threshold_milli u16,
//!         ssim_downsample u8
//! ERROR   UTF-8 message
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::geom::{BBox, CategoryLabel, Detection};
use crate::image::GrayImage;
use crate::temporal::{DecisionSource, HoldMode, LabeledBox};

pub const MAGIC: [u8; 4] = *b"USMK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const MAX_PAYLOAD: u32 = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    Oversize(u64),
    #[error("message truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Frame = 1,
    Masked = 2,
    Error = 3,
    Config = 4,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(MsgType::Frame),
            2 => Some(MsgType::Masked),
            3 => Some(MsgType::Error),
            4 => Some(MsgType::Config),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    pub fn error(text: impl Into<String>) -> Self {
        Self::new(MsgType::Error, text.into().into_bytes())
    }
}

pub fn encode_message(m: &WireMessage) -> Result<Vec<u8>, WireError> {
    let len = m.payload.len() as u64;
    if len > u64::from(MAX_PAYLOAD) {
        return Err(WireError::Oversize(len));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + m.payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(m.msg_type as u8);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.extend_from_slice(&m.payload);
    Ok(out)
}

/// Validates a header and returns the message type and payload length.
fn parse_header(buf: &[u8]) -> Result<(MsgType, usize), WireError> {
    if buf.len() >= 4 && buf[..4] != MAGIC {
        return Err(WireError::BadMagic(buf[..4].try_into().unwrap()));
    }
    if buf.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            available: buf.len(),
        });
    }
    if buf[4] != VERSION {
        return Err(WireError::UnsupportedVersion(buf[4]));
    }
    let msg_type = MsgType::from_code(buf[5]).ok_or(WireError::UnknownType(buf[5]))?;
    let len = u32::from_be_bytes(buf[6..10].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversize(u64::from(len)));
    }
    Ok((msg_type, len as usize))
}

/// Decodes one message from the front of `buf`, returning it and the
/// number of bytes consumed.
pub fn decode_message(buf: &[u8]) -> Result<(WireMessage, usize), WireError> {
    let (msg_type, len) = parse_header(buf)?;
    let needed = HEADER_LEN + len;
    if buf.len() < needed {
        return Err(WireError::Truncated {
            needed,
            available: buf.len(),
        });
    }
    Ok((
        WireMessage::new(msg_type, buf[HEADER_LEN..needed].to_vec()),
        needed,
    ))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, io::Error> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads one message. Returns `Ok(None)` on a clean end of stream between
/// messages. The payload length is checked before any payload is read.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<WireMessage>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_full(r, &mut header)?;
    if got == 0 {
        return Ok(None);
    }
    let (msg_type, len) = parse_header(&header[..got])?;
    let mut payload = vec![0u8; len];
    let got = read_full(r, &mut payload)?;
    if got < len {
        return Err(WireError::Truncated {
            needed: HEADER_LEN + len,
            available: HEADER_LEN + got,
        });
    }
    Ok(Some(WireMessage::new(msg_type, payload)))
}

pub fn write_message<W: Write>(w: &mut W, m: &WireMessage) -> Result<(), WireError> {
    w.write_all(&encode_message(m)?)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Payload(format!(
                "payload ends inside {what} (offset {}, need {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, WireError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::Payload(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireBox {
    pub x0: u16,
    pub y0: u16,
    pub x1: u16,
    pub y1: u16,
    pub category: u8,
}

impl WireBox {
    pub fn from_bbox(b: &BBox, category: CategoryLabel) -> Self {
        let px = |v: f64| v.round().clamp(0.0, f64::from(u16::MAX)) as u16;
        Self {
            x0: px(b.x_min()),
            y0: px(b.y_min()),
            x1: px(b.x_max()),
            y1: px(b.y_max()),
            category: category.code(),
        }
    }

    pub fn to_labeled(&self) -> Result<LabeledBox, WireError> {
        let bbox = BBox::new(
            f64::from(self.x0),
            f64::from(self.y0),
            f64::from(self.x1),
            f64::from(self.y1),
        )
        .map_err(|e| WireError::Payload(e.to_string()))?;
        let category = CategoryLabel::from_code(self.category)
            .ok_or_else(|| WireError::Payload(format!("unknown category {}", self.category)))?;
        Ok(LabeledBox { bbox, category })
    }

    fn read(c: &mut Cursor<'_>) -> Result<Self, WireError> {
        Ok(Self {
            x0: c.u16("box")?,
            y0: c.u16("box")?,
            x1: c.u16("box")?,
            y1: c.u16("box")?,
            category: c.u8("box")?,
        })
    }

    fn write(&self, out: &mut Vec<u8>) {
        for v in [self.x0, self.y0, self.x1, self.y1] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.push(self.category);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireDetection {
    pub bbox: WireBox,
    /// Confidence in thousandths, 0..=1000.
    pub conf_milli: u16,
}

impl WireDetection {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            bbox: WireBox::from_bbox(&d.bbox, d.category),
            conf_milli: (d.confidence() * 1000.0).round() as u16,
        }
    }

    pub fn to_detection(&self, frame_index: u64) -> Result<Detection, WireError> {
        let b = self.bbox.to_labeled()?;
        Detection::new(frame_index, b.bbox, b.category, f64::from(self.conf_milli) / 1000.0)
            .map_err(|e| WireError::Payload(e.to_string()))
    }
}

fn dims_u16(width: usize, height: usize) -> Result<(u16, u16), WireError> {
    match (u16::try_from(width), u16::try_from(height)) {
        (Ok(w), Ok(h)) => Ok((w, h)),
        _ => Err(WireError::Payload(format!("frame {width}x{height} exceeds 65535 px per side"))),
    }
}

fn read_pixels(c: &mut Cursor<'_>, width: u16, height: u16) -> Result<GrayImage, WireError> {
    let n = usize::from(width) * usize::from(height);
    let pixels = c.take(n, "pixel data")?.to_vec();
    GrayImage::new(usize::from(width), usize::from(height), pixels).map_err(|e| WireError::Payload(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePayload {
    pub frame_index: u32,
    pub detections: Vec<WireDetection>,
    pub image: GrayImage,
}

impl FramePayload {
    pub fn new(frame_index: u32, image: GrayImage, dets: &[Detection]) -> Self {
        Self {
            frame_index,
            detections: dets.iter().map(WireDetection::from_detection).collect(),
            image,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let (w, h) = dims_u16(self.image.width(), self.image.height())?;
        let n = u16::try_from(self.detections.len())
            .map_err(|_| WireError::Payload("more than 65535 detections".into()))?;
        let mut out = Vec::with_capacity(10 + self.detections.len() * 11 + self.image.data().len());
        out.extend_from_slice(&self.frame_index.to_be_bytes());
        out.extend_from_slice(&w.to_be_bytes());
        out.extend_from_slice(&h.to_be_bytes());
        out.extend_from_slice(&n.to_be_bytes());
        for d in &self.detections {
            d.bbox.write(&mut out);
            out.extend_from_slice(&d.conf_milli.to_be_bytes());
        }
        out.extend_from_slice(self.image.data());
        Ok(out)
    }

    pub fn decode(payload: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(payload);
        let frame_index = c.u32("frame index")?;
        let width = c.u16("width")?;
        let height = c.u16("height")?;
        let n = c.u16("detection count")?;
        let mut detections = Vec::with_capacity(usize::from(n));
        for _ in 0..n {
            let bbox = WireBox::read(&mut c)?;
            let conf_milli = c.u16("confidence")?;
            if conf_milli > 1000 {
                return Err(WireError::Payload(format!("conf_milli {conf_milli} exceeds 1000")));
            }
            detections.push(WireDetection { bbox, conf_milli });
        }
        let image = read_pixels(&mut c, width, height)?;
        c.finish()?;
        Ok(Self {
            frame_index,
            detections,
            image,
        })
    }

    pub fn to_detections(&self) -> Result<Vec<Detection>, WireError> {
        self.detections
            .iter()
            .map(|d| d.to_detection(u64::from(self.frame_index)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedPayload {
    pub frame_index: u32,
    pub source: DecisionSource,
    pub boxes: Vec<WireBox>,
    pub image: GrayImage,
}

impl MaskedPayload {
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let (w, h) = dims_u16(self.image.width(), self.image.height())?;
        let n = u16::try_from(self.boxes.len()).map_err(|_| WireError::Payload("more than 65535 boxes".into()))?;
        let mut out = Vec::with_capacity(11 + self.boxes.len() * 9 + self.image.data().len());
        out.extend_from_slice(&self.frame_index.to_be_bytes());
        out.extend_from_slice(&w.to_be_bytes());
        out.extend_from_slice(&h.to_be_bytes());
        out.push(self.source.code());
        out.extend_from_slice(&n.to_be_bytes());
        for b in &self.boxes {
            b.write(&mut out);
        }
        out.extend_from_slice(self.image.data());
        Ok(out)
    }

    pub fn decode(payload: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(payload);
        let frame_index = c.u32("frame index")?;
        let width = c.u16("width")?;
        let height = c.u16("height")?;
        let tag = c.u8("source")?;
        let source = DecisionSource::from_code(tag).ok_or_else(|| WireError::Payload(format!("unknown source tag {tag}")))?;
        let n = c.u16("box count")?;
        let boxes = (0..n).map(|_| WireBox::read(&mut c)).collect::<Result<Vec<_>, _>>()?;
        let image = read_pixels(&mut c, width, height)?;
        c.finish()?;
        Ok(Self {
            frame_index,
            source,
            boxes,
            image,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfigPayload {
    pub conf_milli: u16,
    pub mode: HoldMode,
    pub hold_frames: u32,
    pub ssim_threshold_milli: u16,
    pub ssim_downsample: u8,
}

impl ConfigPayload {
    pub const LEN: usize = 10;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.conf_milli.to_be_bytes());
        out.push(self.mode.code());
        out.extend_from_slice(&self.hold_frames.to_be_bytes());
        out.extend_from_slice(&self.ssim_threshold_milli.to_be_bytes());
        out.push(self.ssim_downsample);
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(payload);
        let conf_milli = c.u16("confidence")?;
        let mode_code = c.u8("mode")?;
        let hold_frames = c.u32("hold frames")?;
        let ssim_threshold_milli = c.u16("ssim threshold")?;
        let ssim_downsample = c.u8("downsample")?;
        c.finish()?;
        let mode = HoldMode::from_code(mode_code).ok_or_else(|| WireError::Payload(format!("unknown hold mode {mode_code}")))?;
        if conf_milli > 1000 || ssim_threshold_milli > 1000 {
            return Err(WireError::Payload("thresholds must be at most 1000 milli".into()));
        }
        if ssim_downsample == 0 {
            return Err(WireError::Payload("downsample must be at least 1".into()));
        }
        Ok(Self {
            conf_milli,
            mode,
            hold_frames,
            ssim_threshold_milli,
            ssim_downsample,
        })
    }
}
