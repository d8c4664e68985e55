//! Framing for the external embedder protocol.
//!
//! Handshake: the parent writes the line `{"proto":1}`, the child answers
//! `{"proto":1,"dim":d}`. A request is an 8-byte id, then width, height and
//! channels as 4-byte integers, then the raw samples. A response is the
//! echoed id followed by `d` binary64 values. All integers and floats are
//! little-endian.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuf;

pub const PROTO_VERSION: u32 = 1;
pub const REQUEST_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub proto: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloReply {
    pub proto: u32,
    pub dim: usize,
}

pub fn hello_line() -> String {
    let mut s = serde_json::to_string(&Hello { proto: PROTO_VERSION }).unwrap();
    s.push('\n');
    s
}

/// Parses the child's handshake reply and checks version and dimension.
pub fn parse_hello_reply(line: &str) -> Result<usize> {
    let reply: HelloReply =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Handshake(format!("bad reply {:?}: {e}", line.trim_end())))?;
    if reply.proto != PROTO_VERSION {
        return Err(Error::Handshake(format!("unsupported protocol version {}", reply.proto)));
    }
    if reply.dim == 0 {
        return Err(Error::Handshake("child advertised dimension 0".into()));
    }
    Ok(reply.dim)
}

pub fn encode_request(id: u64, img: &ImageBuf) -> Vec<u8> {
    let mut out = Vec::with_capacity(REQUEST_HEADER_LEN + img.pixels().len());
    out.extend_from_slice(&id.to_le_bytes());
    for d in [img.width(), img.height(), img.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(img.pixels());
    out
}

/// Decodes one complete request frame.
pub fn decode_request(frame: &[u8]) -> Result<(u64, ImageBuf)> {
    if frame.len() < REQUEST_HEADER_LEN {
        return Err(Error::Protocol(format!("truncated request header ({} bytes)", frame.len())));
    }
    let (id, w, h, c) = parse_request_header(frame[..REQUEST_HEADER_LEN].try_into().unwrap());
    let body = &frame[REQUEST_HEADER_LEN..];
    let need = request_body_len(w, h, c)?;
    if body.len() != need {
        return Err(Error::Protocol(format!("request body has {} bytes, expected {need}", body.len())));
    }
    Ok((id, ImageBuf::new(w, h, c, body.to_vec())?))
}

fn parse_request_header(hdr: &[u8; REQUEST_HEADER_LEN]) -> (u64, usize, usize, usize) {
    let u32_at = |i: usize| u32::from_le_bytes(hdr[i..i + 4].try_into().unwrap()) as usize;
    (u64::from_le_bytes(hdr[..8].try_into().unwrap()), u32_at(8), u32_at(12), u32_at(16))
}

fn request_body_len(w: usize, h: usize, c: usize) -> Result<usize> {
    w.checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .ok_or(Error::DimensionOverflow { width: w, height: h, channels: c })
}

/// Reads one request from a stream; `None` on a clean end of stream.
pub fn read_request(reader: &mut impl Read) -> Result<Option<(u64, ImageBuf)>> {
    let mut hdr = [0u8; REQUEST_HEADER_LEN];
    if !read_full(reader, &mut hdr)? {
        return Ok(None);
    }
    let (id, w, h, c) = parse_request_header(&hdr);
    let mut body = vec![0u8; request_body_len(w, h, c)?];
    if !body.is_empty() && !read_full(reader, &mut body)? {
        return Err(Error::Protocol("stream ended inside a request body".into()));
    }
    Ok(Some((id, ImageBuf::new(w, h, c, body)?)))
}

pub fn response_len(dim: usize) -> usize {
    8 + 8 * dim
}

pub fn encode_response(id: u64, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(response_len(values.len()));
    out.extend_from_slice(&id.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_response(frame: &[u8], dim: usize) -> Result<(u64, Vec<f64>)> {
    if frame.len() != response_len(dim) {
        return Err(Error::Protocol(format!("response has {} bytes, expected {}", frame.len(), response_len(dim))));
    }
    let id = u64::from_le_bytes(frame[..8].try_into().unwrap());
    let values = frame[8..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Ok((id, values))
}

pub fn write_frame(writer: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    writer.write_all(frame)?;
    writer.flush()
}

/// Fills `buf` completely. Returns `false` if the stream ends before the
/// first byte; a stream ending part-way is a protocol error.
pub fn read_full(reader: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Protocol(format!("stream ended after {filled} of {} bytes", buf.len()))),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Protocol(format!("read failed: {e}"))),
        }
    }
    Ok(true)
}
