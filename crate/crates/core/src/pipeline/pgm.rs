//! Binary PGM (P5, maxval 255) and the raw concatenated frame stream.
//!
//! Raw stream layout: `b"USRF"`, width and height as big-endian `u32`,
//! then `width * height` bytes per frame until end of input.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::image::GrayImage;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("not a binary PGM (expected P5, found {0:?})")]
    BadMagic(String),
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("unsupported maxval {0}; only 8-bit PGM (maxval 255) is accepted")]
    Maxval(u32),
    #[error("pixel data truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("raw stream header is invalid: {0}")]
    RawHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn skip_space_and_comments(buf: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<u32, PgmError> {
    *pos = skip_space_and_comments(buf, *pos);
    let start = *pos;
    while *pos < buf.len() && buf[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PgmError::Header(format!("missing {what}")));
    }
    std::str::from_utf8(&buf[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PgmError::Header(format!("{what} out of range")))
}

pub fn decode_pgm(buf: &[u8]) -> Result<GrayImage, PgmError> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        let seen = String::from_utf8_lossy(&buf[..buf.len().min(2)]).into_owned();
        return Err(PgmError::BadMagic(seen));
    }
    let mut pos = 2;
    let width = header_number(buf, &mut pos, "width")?;
    let height = header_number(buf, &mut pos, "height")?;
    let maxval = header_number(buf, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(PgmError::Maxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(PgmError::Header(format!("empty image {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(PgmError::Header("missing separator before pixel data".into()));
    }
    pos += 1;
    let expected = width as usize * height as usize;
    let actual = buf.len() - pos;
    if actual < expected {
        return Err(PgmError::Truncated { expected, actual });
    }
    let data = buf[pos..pos + expected].to_vec();
    Ok(GrayImage::new(width as usize, height as usize, data).expect("size checked above"))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(img.data());
    out
}

pub fn read_pgm(path: impl AsRef<std::path::Path>) -> Result<GrayImage, PgmError> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<std::path::Path>, img: &GrayImage) -> Result<(), PgmError> {
    std::fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub const RAW_MAGIC: &[u8; 4] = b"USRF";

pub fn write_raw_header<W: Write>(out: &mut W, width: usize, height: usize) -> Result<(), PgmError> {
    let w = u32::try_from(width).map_err(|_| PgmError::RawHeader("width too large".into()))?;
    let h = u32::try_from(height).map_err(|_| PgmError::RawHeader("height too large".into()))?;
    out.write_all(RAW_MAGIC)?;
    out.write_all(&w.to_be_bytes())?;
    out.write_all(&h.to_be_bytes())?;
    Ok(())
}

/// Reads frames from a raw stream, one at a time.
pub struct RawFrameReader<R> {
    inner: R,
    width: usize,
    height: usize,
}

impl<R: Read> RawFrameReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PgmError> {
        let mut header = [0u8; 12];
        inner.read_exact(&mut header).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => PgmError::RawHeader("stream shorter than its header".into()),
            _ => PgmError::Io(e),
        })?;
        if &header[..4] != RAW_MAGIC {
            return Err(PgmError::RawHeader(format!("bad magic {:?}", &header[..4])));
        }
        let width = u32::from_be_bytes(header[4..8].try_into().unwrap()) as usize;
        let height = u32::from_be_bytes(header[8..12].try_into().unwrap()) as usize;
        if width == 0 || height == 0 {
            return Err(PgmError::RawHeader(format!("empty frame size {width}x{height}")));
        }
        Ok(Self {
            inner,
            width,
            height,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// `Ok(None)` at a clean end of stream; a partial frame is an error.
    pub fn next_frame(&mut self) -> Result<Option<GrayImage>, PgmError> {
        let expected = self.width * self.height;
        let mut buf = vec![0u8; expected];
        let mut filled = 0;
        while filled < expected {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        if filled == 0 {
            return Ok(None);
        }
        if filled < expected {
            return Err(PgmError::Truncated {
                expected,
                actual: filled,
            });
        }
        Ok(Some(GrayImage::new(self.width, self.height, buf).expect("exact size")))
    }
}
