//! Binary message format.
//!
//! ```text
//! header  magic "VFNS" | version u8 | msg_type u8 | phase u8 | sender u16 | round u32
//! payload ndim u8 | dims u32 × ndim | data (f32, or f64 when version = 2)
//! ```
//!
//! All integers and reals are little-endian. Messages are self-delimiting,
//! so a stream reader needs no extra framing.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const MAGIC: [u8; 4] = *b"VFNS";
pub const HEADER_LEN: usize = 13;
/// Width of every activation on the wire.
pub const ACT_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    BadType(u8),
    #[error("unknown phase {0}")]
    BadPhase(u8),
    #[error("buffer truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("activation width {0}, expected {ACT_DIM}")]
    ActWidth(usize),
    #[error("payload too large")]
    TooLarge,
    #[error("i/o: {0}")]
    Io(String),
}

/// Real width of the payload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    /// Lossless oracle mode.
    F64,
}

impl Precision {
    pub fn version(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    pub fn from_version(v: u8) -> Result<Self, WireError> {
        match v {
            1 => Ok(Precision::F32),
            2 => Ok(Precision::F64),
            _ => Err(WireError::BadVersion(v)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// The value a real takes after crossing the wire.
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MsgType {
    #[serde(rename = "FWD_ACT")]
    FwdAct,
    #[serde(rename = "BWD_GRAD")]
    BwdGrad,
    #[serde(rename = "CTRL")]
    Ctrl,
}

impl MsgType {
    fn code(self) -> u8 {
        match self {
            MsgType::FwdAct => 0,
            MsgType::BwdGrad => 1,
            MsgType::Ctrl => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self, WireError> {
        match c {
            0 => Ok(MsgType::FwdAct),
            1 => Ok(MsgType::BwdGrad),
            2 => Ok(MsgType::Ctrl),
            _ => Err(WireError::BadType(c)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "W_UPDATE")]
    WUpdate,
    #[serde(rename = "ALPHA_UPDATE")]
    AlphaUpdate,
    #[serde(rename = "EVAL")]
    Eval,
    /// Fused weight and architecture update.
    #[serde(rename = "JOINT")]
    Joint,
}

impl Phase {
    fn code(self) -> u8 {
        match self {
            Phase::WUpdate => 0,
            Phase::AlphaUpdate => 1,
            Phase::Eval => 2,
            Phase::Joint => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self, WireError> {
        match c {
            0 => Ok(Phase::WUpdate),
            1 => Ok(Phase::AlphaUpdate),
            2 => Ok(Phase::Eval),
            3 => Ok(Phase::Joint),
            _ => Err(WireError::BadPhase(c)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub precision: Precision,
    pub msg_type: MsgType,
    pub phase: Phase,
    pub sender: u16,
    pub round: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub header: Header,
    pub payload: Tensor,
}

impl Message {
    /// Builds a message whose payload is already rounded to the wire
    /// precision, so that `decode(encode(m)) == m`.
    pub fn new(header: Header, payload: &Tensor) -> Self {
        let p = header.precision;
        Self {
            header,
            payload: payload.map(|x| p.round(x)),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 1 + 4 * self.payload.shape().len() + self.header.precision.width() * self.payload.numel()
    }

    fn check(&self) -> Result<(), WireError> {
        let shape = self.payload.shape();
        if shape.len() > u8::MAX as usize || shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(WireError::TooLarge);
        }
        if self.header.msg_type == MsgType::FwdAct && (shape.len() != 2 || shape[1] != ACT_DIM) {
            return Err(WireError::ActWidth(shape.get(1).copied().unwrap_or(0)));
        }
        Ok(())
    }
}

pub fn encode_message(m: &Message) -> Result<Vec<u8>, WireError> {
    m.check()?;
    let h = &m.header;
    let mut out = Vec::with_capacity(m.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(h.precision.version());
    out.push(h.msg_type.code());
    out.push(h.phase.code());
    out.extend_from_slice(&h.sender.to_le_bytes());
    out.extend_from_slice(&h.round.to_le_bytes());
    let shape = m.payload.shape();
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match h.precision {
        Precision::F32 => {
            for &x in m.payload.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &x in m.payload.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::TooLarge)?;
        if end > self.buf.len() {
            return Err(WireError::Truncated {
                need: end,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn parse_header(b: &[u8]) -> Result<Header, WireError> {
    let magic: [u8; 4] = b[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    Ok(Header {
        precision: Precision::from_version(b[4])?,
        msg_type: MsgType::from_code(b[5])?,
        phase: Phase::from_code(b[6])?,
        sender: u16::from_le_bytes([b[7], b[8]]),
        round: u32::from_le_bytes(b[9..13].try_into().expect("4 bytes")),
    })
}

fn parse_dims(ndim: usize, b: &[u8]) -> Vec<usize> {
    b.chunks_exact(4)
        .take(ndim)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect()
}

fn data_len(dims: &[usize], p: Precision) -> Result<usize, WireError> {
    dims.iter()
        .try_fold(p.width(), |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= isize::MAX as usize)
        .ok_or(WireError::TooLarge)
}

fn parse_data(b: &[u8], p: Precision) -> Vec<f64> {
    match p {
        Precision::F32 => b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Precision::F64 => b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    }
}

fn assemble(header: Header, dims: Vec<usize>, data: Vec<f64>) -> Result<Message, WireError> {
    let payload = Tensor::new(dims, data).map_err(|_| WireError::TooLarge)?;
    let m = Message { header, payload };
    m.check()?;
    Ok(m)
}

pub fn decode_message(buf: &[u8]) -> Result<Message, WireError> {
    let mut c = Cursor { buf, pos: 0 };
    let header = parse_header(c.take(HEADER_LEN)?)?;
    let ndim = c.take(1)?[0] as usize;
    let dims = parse_dims(ndim, c.take(4 * ndim)?);
    let n = data_len(&dims, header.precision)?;
    let data = parse_data(c.take(n)?, header.precision);
    if c.pos != buf.len() {
        return Err(WireError::Trailing(buf.len() - c.pos));
    }
    assemble(header, dims, data)
}

fn read_exact<R: Read>(r: &mut R, raw: &mut Vec<u8>, n: usize) -> Result<(), WireError> {
    let start = raw.len();
    raw.resize(start + n, 0);
    r.read_exact(&mut raw[start..]).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => WireError::Truncated {
            need: start + n,
            have: start,
        },
        _ => WireError::Io(e.to_string()),
    })
}

/// Reads exactly one message from a stream and returns its raw bytes.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, WireError> {
    let mut raw = Vec::new();
    read_exact(r, &mut raw, HEADER_LEN + 1)?;
    let header = parse_header(&raw[..HEADER_LEN])?;
    let ndim = raw[HEADER_LEN] as usize;
    read_exact(r, &mut raw, 4 * ndim)?;
    let dims = parse_dims(ndim, &raw[HEADER_LEN + 1..]);
    let n = data_len(&dims, header.precision)?;
    read_exact(r, &mut raw, n)?;
    Ok(raw)
}
