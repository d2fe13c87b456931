//! Frame layout.
//!
//! ```text
//! frame   := "VLCI" version:u8 type:u8 payload_len:u32 payload
//! 0x01 InferRequest   session:u64 question:str original_w:u16 original_h:u16 image
//! 0x02 Answer         session:u64 text:str is_final:u8 score:f64
//! 0x03 RoiRequest     session:u64 b1:u32 b2:u32
//! 0x04 LocalImage     session:u64 image
//! 0x05 ProtocolError  session:u64 code:u16 detail:str
//! image   := codec:u8 width:u16 height:u16 data_len:u32 data
//! str     := len:u32 utf8
//! ```
//!
//! All integers and reals are big-endian.

use crate::image::{Codec, ImageError, RawImage};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"VLCI";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

pub const TYPE_INFER_REQUEST: u8 = 0x01;
pub const TYPE_ANSWER: u8 = 0x02;
pub const TYPE_ROI_REQUEST: u8 = 0x03;
pub const TYPE_LOCAL_IMAGE: u8 = 0x04;
pub const TYPE_PROTOCOL_ERROR: u8 = 0x05;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    TruncatedFrame { needed: usize, available: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("payload of {0} bytes exceeds the u32 length field")]
    OversizePayload(usize),
    #[error("invalid field {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

/// Protocol error codes carried by [`Message::ProtocolError`].
pub mod code {
    pub const OUT_OF_ORDER: u16 = 1;
    pub const SESSION_MISMATCH: u16 = 2;
    pub const TIMEOUT: u16 = 3;
    pub const BACKEND_FAULT: u16 = 4;
    pub const MALFORMED_FRAME: u16 = 5;
    pub const INVALID_IMAGE: u16 = 6;
    pub const INVALID_ROI: u16 = 7;
    pub const SESSION_CLOSED: u16 = 8;
    pub const INTERNAL: u16 = 9;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub codec_id: u8,
    pub width: u16,
    pub height: u16,
    pub data: Vec<u8>,
}

impl ImagePayload {
    pub fn encode_image(img: &RawImage, codec: Codec) -> Result<Self, WireError> {
        let dim = |v: u32, field| {
            u16::try_from(v).map_err(|_| WireError::InvalidField {
                field,
                reason: format!("{v} exceeds u16"),
            })
        };
        let width = dim(img.width(), "image.width")?;
        let height = dim(img.height(), "image.height")?;
        let data = codec.encode(img).map_err(|e| WireError::InvalidField {
            field: "image.data",
            reason: e.to_string(),
        })?;
        Ok(Self {
            codec_id: codec.id(),
            width,
            height,
            data,
        })
    }

    pub fn decode_image(&self) -> Result<RawImage, ImageError> {
        let img = Codec::decode(self.codec_id, self.width.into(), self.height.into(), &self.data)?;
        debug_assert_eq!((img.width(), img.height()), (self.width.into(), self.height.into()));
        Ok(img)
    }

    /// Bytes this payload occupies inside a frame.
    pub fn encoded_len(&self) -> usize {
        9 + self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    InferRequest {
        session_id: u64,
        question: String,
        original_w: u16,
        original_h: u16,
        image: ImagePayload,
    },
    Answer {
        session_id: u64,
        text: String,
        is_final: bool,
        uncertainty_score: f64,
    },
    RoiRequest {
        session_id: u64,
        b1: u32,
        b2: u32,
    },
    LocalImage {
        session_id: u64,
        image: ImagePayload,
    },
    ProtocolError {
        session_id: u64,
        code: u16,
        detail: String,
    },
}

impl Message {
    pub fn session_id(&self) -> u64 {
        match self {
            Self::InferRequest { session_id, .. }
            | Self::Answer { session_id, .. }
            | Self::RoiRequest { session_id, .. }
            | Self::LocalImage { session_id, .. }
            | Self::ProtocolError { session_id, .. } => *session_id,
        }
    }

    pub fn msg_type(&self) -> u8 {
        match self {
            Self::InferRequest { .. } => TYPE_INFER_REQUEST,
            Self::Answer { .. } => TYPE_ANSWER,
            Self::RoiRequest { .. } => TYPE_ROI_REQUEST,
            Self::LocalImage { .. } => TYPE_LOCAL_IMAGE,
            Self::ProtocolError { .. } => TYPE_PROTOCOL_ERROR,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::InferRequest { .. } => "InferRequest",
            Self::Answer { .. } => "Answer",
            Self::RoiRequest { .. } => "RoiRequest",
            Self::LocalImage { .. } => "LocalImage",
            Self::ProtocolError { .. } => "ProtocolError",
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let len = u32::try_from(s.len()).map_err(|_| WireError::OversizePayload(s.len()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_image(out: &mut Vec<u8>, img: &ImagePayload) -> Result<(), WireError> {
    let len = u32::try_from(img.data.len()).map_err(|_| WireError::OversizePayload(img.data.len()))?;
    out.push(img.codec_id);
    out.extend_from_slice(&img.width.to_be_bytes());
    out.extend_from_slice(&img.height.to_be_bytes());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&img.data);
    Ok(())
}

fn payload(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    out.extend_from_slice(&msg.session_id().to_be_bytes());
    match msg {
        Message::InferRequest {
            question,
            original_w,
            original_h,
            image,
            ..
        } => {
            put_str(&mut out, question)?;
            out.extend_from_slice(&original_w.to_be_bytes());
            out.extend_from_slice(&original_h.to_be_bytes());
            put_image(&mut out, image)?;
        }
        Message::Answer {
            text,
            is_final,
            uncertainty_score,
            ..
        } => {
            put_str(&mut out, text)?;
            out.push(u8::from(*is_final));
            out.extend_from_slice(&uncertainty_score.to_be_bytes());
        }
        Message::RoiRequest { b1, b2, .. } => {
            out.extend_from_slice(&b1.to_be_bytes());
            out.extend_from_slice(&b2.to_be_bytes());
        }
        Message::LocalImage { image, .. } => put_image(&mut out, image)?,
        Message::ProtocolError { code, detail, .. } => {
            out.extend_from_slice(&code.to_be_bytes());
            put_str(&mut out, detail)?;
        }
    }
    Ok(out)
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let body = payload(msg)?;
    let len = u32::try_from(body.len()).map_err(|_| WireError::OversizePayload(body.len()))?;
    let mut frame = Vec::with_capacity(HEADER_LEN + body.len());
    frame.extend_from_slice(MAGIC);
    frame.push(VERSION);
    frame.push(msg.msg_type());
    frame.extend_from_slice(&len.to_be_bytes());
    frame.extend(body);
    Ok(frame)
}

/// Parsed fixed header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: u8,
    pub payload_len: u32,
}

/// Parses and checks the 10-byte header at the front of `bytes`.
pub fn decode_header(bytes: &[u8]) -> Result<Header, WireError> {
    if bytes.len() < HEADER_LEN {
        // a short prefix that is already wrong is reported as such
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(WireError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(WireError::TruncatedFrame {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(WireError::UnknownVersion(bytes[4]));
    }
    let msg_type = bytes[5];
    if !(TYPE_INFER_REQUEST..=TYPE_PROTOCOL_ERROR).contains(&msg_type) {
        return Err(WireError::UnknownType(msg_type));
    }
    Ok(Header {
        msg_type,
        payload_len: u32::from_be_bytes(bytes[6..10].try_into().unwrap()),
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(WireError::TruncatedFrame {
                needed: HEADER_LEN + self.pos + n,
                available: HEADER_LEN + self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, field: &'static str) -> Result<String, WireError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| WireError::InvalidField {
            field,
            reason: e.to_string(),
        })
    }

    fn image(&mut self) -> Result<ImagePayload, WireError> {
        let codec_id = self.u8()?;
        let width = self.u16()?;
        let height = self.u16()?;
        let n = self.u32()? as usize;
        let data = self.take(n)?.to_vec();
        Ok(ImagePayload {
            codec_id,
            width,
            height,
            data,
        })
    }
}

/// Decodes exactly one frame; the slice must hold nothing else.
pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
    let header = decode_header(bytes)?;
    let body_len = header.payload_len as usize;
    let frame_len = HEADER_LEN + body_len;
    if bytes.len() < frame_len {
        return Err(WireError::TruncatedFrame {
            needed: frame_len,
            available: bytes.len(),
        });
    }
    if bytes.len() > frame_len {
        return Err(WireError::TrailingBytes(bytes.len() - frame_len));
    }
    let mut c = Cursor {
        buf: &bytes[HEADER_LEN..],
        pos: 0,
    };
    let session_id = c.u64()?;
    let msg = match header.msg_type {
        TYPE_INFER_REQUEST => Message::InferRequest {
            session_id,
            question: c.str("question")?,
            original_w: c.u16()?,
            original_h: c.u16()?,
            image: c.image()?,
        },
        TYPE_ANSWER => {
            let text = c.str("text")?;
            let is_final = match c.u8()? {
                0 => false,
                1 => true,
                v => {
                    return Err(WireError::InvalidField {
                        field: "is_final",
                        reason: format!("expected 0 or 1, got {v}"),
                    })
                }
            };
            Message::Answer {
                session_id,
                text,
                is_final,
                uncertainty_score: c.f64()?,
            }
        }
        TYPE_ROI_REQUEST => Message::RoiRequest {
            session_id,
            b1: c.u32()?,
            b2: c.u32()?,
        },
        TYPE_LOCAL_IMAGE => Message::LocalImage {
            session_id,
            image: c.image()?,
        },
        TYPE_PROTOCOL_ERROR => Message::ProtocolError {
            session_id,
            code: c.u16()?,
            detail: c.str("detail")?,
        },
        _ => unreachable!("type checked in header"),
    };
    if c.pos != body_len {
        return Err(WireError::TrailingBytes(body_len - c.pos));
    }
    Ok(msg)
}
