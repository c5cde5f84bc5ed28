//! Binary framing for talking to an out-of-process denoiser.
//!
//! All integers are little-endian. Every frame starts with the 4-byte magic
//! `SSDX`, a `u16` version and a `u8` message type:
//!
//! | type | body                                                     |
//! |------|----------------------------------------------------------|
//! | 1    | eps request: `u32` timestep, `u8` ndim, ndim x `u32` dims, f32 payload |
//! | 2    | eps response: same layout as the request                 |
//! | 3    | shutdown: no body                                        |
//! | 4    | error: `u32` byte length, UTF-8 message                  |

use std::io::{self, Read, Write};

pub const MAGIC: [u8; 4] = *b"SSDX";
pub const VERSION: u16 = 1;

pub const MSG_EPS_REQUEST: u8 = 1;
pub const MSG_EPS_RESPONSE: u8 = 2;
pub const MSG_SHUTDOWN: u8 = 3;
pub const MSG_ERROR: u8 = 4;

const HEADER_LEN: usize = 7;
/// Upper bound on payload elements accepted from the wire (1 GiB of f32).
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    EpsRequest(TensorMessage),
    EpsResponse(TensorMessage),
    Shutdown,
    Error(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorMessage {
    pub timestep: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<f32>,
}

impl TensorMessage {
    pub fn new(timestep: u32, dims: Vec<u32>, payload: Vec<f32>) -> Result<Self, ProtocolError> {
        let msg = Self {
            timestep,
            dims,
            payload,
        };
        msg.check()?;
        Ok(msg)
    }

    fn element_count(dims: &[u32]) -> u64 {
        dims.iter().map(|&d| d as u64).product()
    }

    fn check(&self) -> Result<(), ProtocolError> {
        if self.dims.is_empty() || self.dims.len() > u8::MAX as usize {
            return Err(ProtocolError::BadRank(self.dims.len()));
        }
        let want = Self::element_count(&self.dims);
        if want != self.payload.len() as u64 {
            return Err(ProtocolError::PayloadMismatch {
                expected: want,
                actual: self.payload.len() as u64,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad magic bytes {found:02x?} (expected \"SSDX\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("frame truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("tensor rank {0} is not representable")]
    BadRank(usize),
    #[error("payload holds {actual} elements, dims require {expected}")]
    PayloadMismatch { expected: u64, actual: u64 },
    #[error("error message is not valid UTF-8")]
    InvalidUtf8,
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("unexpected {got} frame (expected {expected})")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error("response echoes timestep {got}, request had {sent}")]
    TimestepMismatch { sent: u32, got: u32 },
    #[error("response dims {got:?} differ from request dims {sent:?}")]
    DimsMismatch { sent: Vec<u32>, got: Vec<u32> },
    #[error("stream error: {0}")]
    Io(String),
}

impl Frame {
    pub fn kind(&self) -> &'static str {
        match self {
            Frame::EpsRequest(_) => "eps-request",
            Frame::EpsResponse(_) => "eps-response",
            Frame::Shutdown => "shutdown",
            Frame::Error(_) => "error",
        }
    }

    fn msg_type(&self) -> u8 {
        match self {
            Frame::EpsRequest(_) => MSG_EPS_REQUEST,
            Frame::EpsResponse(_) => MSG_EPS_RESPONSE,
            Frame::Shutdown => MSG_SHUTDOWN,
            Frame::Error(_) => MSG_ERROR,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.msg_type());
        match self {
            Frame::EpsRequest(m) | Frame::EpsResponse(m) => {
                m.check()?;
                out.reserve(5 + 4 * m.dims.len() + 4 * m.payload.len());
                out.extend_from_slice(&m.timestep.to_le_bytes());
                out.push(m.dims.len() as u8);
                for d in &m.dims {
                    out.extend_from_slice(&d.to_le_bytes());
                }
                for v in &m.payload {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Frame::Shutdown => {}
            Frame::Error(msg) => {
                out.extend_from_slice(&(msg.len() as u32).to_le_bytes());
                out.extend_from_slice(msg.as_bytes());
            }
        }
        Ok(out)
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame, ProtocolError> {
        let mut cursor = bytes;
        let frame = read_frame_inner(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(ProtocolError::TrailingBytes(cursor.len()));
        }
        Ok(frame)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let bytes = self
            .encode()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        w.write_all(&bytes)?;
        w.flush()
    }
}

/// Reads one frame from a stream. `Ok(None)` means a clean end of stream
/// before any byte of a new frame.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, ProtocolError> {
    let mut first = [0u8; 1];
    loop {
        match r.read(&mut first) {
            Ok(0) => return Ok(None),
            Ok(_) => break,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(ProtocolError::Io(e.to_string())),
        }
    }
    let mut chained = io::Read::chain(&first[..], r);
    read_frame_inner(&mut chained).map(Some)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ProtocolError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    needed: buf.len() - filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(ProtocolError::Io(e.to_string())),
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ProtocolError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_frame_inner<R: Read>(r: &mut R) -> Result<Frame, ProtocolError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic { found: magic });
    }
    let mut v = [0u8; 2];
    read_exact(r, &mut v)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let mut t = [0u8; 1];
    read_exact(r, &mut t)?;
    match t[0] {
        MSG_EPS_REQUEST => Ok(Frame::EpsRequest(read_tensor(r)?)),
        MSG_EPS_RESPONSE => Ok(Frame::EpsResponse(read_tensor(r)?)),
        MSG_SHUTDOWN => Ok(Frame::Shutdown),
        MSG_ERROR => {
            let len = read_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            read_exact(r, &mut buf)?;
            String::from_utf8(buf)
                .map(Frame::Error)
                .map_err(|_| ProtocolError::InvalidUtf8)
        }
        other => Err(ProtocolError::UnknownMessageType(other)),
    }
}

fn read_tensor<R: Read>(r: &mut R) -> Result<TensorMessage, ProtocolError> {
    let timestep = read_u32(r)?;
    let mut nd = [0u8; 1];
    read_exact(r, &mut nd)?;
    if nd[0] == 0 {
        return Err(ProtocolError::BadRank(0));
    }
    let dims = (0..nd[0]).map(|_| read_u32(r)).collect::<Result<Vec<_>, _>>()?;
    let count = TensorMessage::element_count(&dims);
    if count > MAX_ELEMENTS {
        return Err(ProtocolError::PayloadMismatch {
            expected: count,
            actual: 0,
        });
    }
    let mut raw = vec![0u8; count as usize * 4];
    read_exact(r, &mut raw)?;
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(TensorMessage {
        timestep,
        dims,
        payload,
    })
}
