//! Edge device: sends the downscaled global image with the question and, when the
//! server asks for a region, crops the original, rescales it and sends it back.

use crate::cost::LedgerEntry;
use crate::image::{crop, resize, Codec, ImageError, RawImage};
use crate::protocol::wire::{code, decode, encode, ImagePayload, Message, WireError};
use crate::roi::{bbox_to_pixels, BoundingBox, GridGeometry};
use crate::transport::{Transport, TransportError};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConfig {
    pub codec: Codec,
    /// Token grid the server uses; fixes the encoder resolution and bbox mapping.
    pub geometry: GridGeometry,
    pub timeout: Option<Duration>,
    pub max_original: (u32, u32),
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            codec: Codec::Raw,
            geometry: GridGeometry::llava(),
            timeout: Some(Duration::from_secs(30)),
            max_original: (4096, 4096),
        }
    }
}

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("server reported error {code}: {detail}")]
    Server { code: u16, detail: String },
    #[error("undecodable server frame: {0}")]
    Decode(WireError),
    #[error("encoding failed: {0}")]
    Encode(WireError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid region request: {0}")]
    InvalidRoi(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("original image {width}x{height} exceeds the {max_w}x{max_h} limit")]
    TooLarge {
        width: u32,
        height: u32,
        max_w: u32,
        max_h: u32,
    },
}

#[derive(Debug)]
pub struct SessionOutcome {
    pub answer: Option<String>,
    pub uncertainty_score: Option<f64>,
    /// Stage-1 answer received ahead of a region request, if the server sends one.
    pub provisional_answer: Option<String>,
    pub bbox: Option<BoundingBox>,
    pub ledger: LedgerEntry,
    pub error: Option<EdgeError>,
}

struct Edge<'a, T: Transport> {
    transport: T,
    session_id: u64,
    config: &'a EdgeConfig,
    ledger: LedgerEntry,
}

impl<T: Transport> Edge<'_, T> {
    fn send(&mut self, msg: &Message) -> Result<(), EdgeError> {
        let frame = encode(msg).map_err(EdgeError::Encode)?;
        self.transport.send(&frame)?;
        Ok(())
    }

    /// Tells the server why the edge is giving up; best effort.
    fn abort(&mut self, code: u16, err: EdgeError) -> EdgeError {
        let _ = self.send(&Message::ProtocolError {
            session_id: self.session_id,
            code,
            detail: err.to_string(),
        });
        err
    }

    fn payload(&self, img: &RawImage) -> Result<ImagePayload, EdgeError> {
        let enc = self.config.geometry.encoder_resolution();
        ImagePayload::encode_image(&resize(img, enc, enc), self.config.codec).map_err(EdgeError::Encode)
    }

    fn local_image(&self, original: &RawImage, b1: u32, b2: u32) -> Result<ImagePayload, EdgeError> {
        let bbox = BoundingBox { b1, b2 };
        let rect = bbox_to_pixels(&bbox, &self.config.geometry, original.width(), original.height())
            .map_err(|e| EdgeError::InvalidRoi(e.to_string()))?;
        self.payload(&crop(original, rect)?)
    }

    fn run(&mut self, original: &RawImage, question: &str, out: &mut SessionOutcome) -> Result<(), EdgeError> {
        let (max_w, max_h) = self.config.max_original;
        let (width, height) = (original.width(), original.height());
        let dims = u16::try_from(width).ok().zip(u16::try_from(height).ok());
        let Some((original_w, original_h)) = dims.filter(|_| width <= max_w && height <= max_h) else {
            return Err(EdgeError::TooLarge {
                width,
                height,
                max_w,
                max_h,
            });
        };

        let image = self.payload(original)?;
        self.ledger.global_bytes_up = image.encoded_len() as u64;
        self.ledger.question_bytes_up = question.len() as u64;
        self.send(&Message::InferRequest {
            session_id: self.session_id,
            question: question.to_owned(),
            original_w,
            original_h,
            image,
        })?;

        let mut roi_done = false;
        loop {
            let frame = self.transport.recv(self.config.timeout)?;
            let msg = match decode(&frame) {
                Ok(m) => m,
                Err(e) => return Err(self.abort(code::MALFORMED_FRAME, EdgeError::Decode(e))),
            };
            if msg.session_id() != self.session_id {
                let err = EdgeError::Protocol(format!(
                    "{} for session {} on session {}",
                    msg.name(),
                    msg.session_id(),
                    self.session_id
                ));
                return Err(self.abort(code::SESSION_MISMATCH, err));
            }
            match msg {
                Message::Answer {
                    text,
                    is_final,
                    uncertainty_score,
                    ..
                } => {
                    self.ledger.answer_bytes_down += text.len() as u64;
                    if is_final {
                        out.answer = Some(text);
                        out.uncertainty_score = Some(uncertainty_score);
                        return Ok(());
                    }
                    if roi_done || out.provisional_answer.is_some() {
                        let err = EdgeError::Protocol("unexpected non-final answer".into());
                        return Err(self.abort(code::OUT_OF_ORDER, err));
                    }
                    out.provisional_answer = Some(text);
                }
                Message::RoiRequest { b1, b2, .. } if !roi_done => {
                    roi_done = true;
                    self.ledger.bbox_bytes_down = 8;
                    self.ledger.retransmitted = true;
                    let image = match self.local_image(original, b1, b2) {
                        Ok(img) => img,
                        Err(e @ EdgeError::InvalidRoi(_)) => return Err(self.abort(code::INVALID_ROI, e)),
                        Err(e) => return Err(self.abort(code::INTERNAL, e)),
                    };
                    out.bbox = Some(BoundingBox { b1, b2 });
                    self.ledger.local_bytes_up = image.encoded_len() as u64;
                    self.send(&Message::LocalImage {
                        session_id: self.session_id,
                        image,
                    })?;
                }
                Message::ProtocolError { code, detail, .. } => {
                    return Err(EdgeError::Server { code, detail });
                }
                other => {
                    let err = EdgeError::Protocol(format!("unexpected {}", other.name()));
                    return Err(self.abort(code::OUT_OF_ORDER, err));
                }
            }
        }
    }
}

/// Runs the edge half of one session. The ledger is filled with whatever was
/// exchanged even when the session fails.
pub fn run_session<T: Transport>(
    transport: T,
    session_id: u64,
    sample_id: &str,
    original: &RawImage,
    question: &str,
    config: &EdgeConfig,
) -> SessionOutcome {
    let mut edge = Edge {
        transport,
        session_id,
        config,
        ledger: LedgerEntry {
            sample_id: sample_id.to_owned(),
            ..LedgerEntry::default()
        },
    };
    let mut out = SessionOutcome {
        answer: None,
        uncertainty_score: None,
        provisional_answer: None,
        bbox: None,
        ledger: LedgerEntry::default(),
        error: None,
    };
    if let Err(e) = edge.run(original, question, &mut out) {
        out.error = Some(e);
    }
    out.ledger = edge.ledger;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::channel_pair;
    use std::thread;

    fn geometry() -> GridGeometry {
        GridGeometry::new(4, 16).unwrap()
    }

    fn config() -> EdgeConfig {
        EdgeConfig {
            geometry: geometry(),
            timeout: Some(Duration::from_secs(5)),
            ..EdgeConfig::default()
        }
    }

    fn image() -> RawImage {
        RawImage::from_fn(32, 32, |x, y| [x as u8, y as u8, 7]).unwrap()
    }

    /// Minimal scripted server: replies to the request with `replies`.
    fn scripted<F>(script: F) -> SessionOutcome
    where
        F: FnOnce(&mut crate::transport::ChannelTransport) + Send + 'static,
    {
        let (edge, mut server) = channel_pair();
        let h = thread::spawn(move || script(&mut server));
        let out = run_session(edge, 3, "s", &image(), "what?", &config());
        h.join().unwrap();
        out
    }

    fn send(t: &mut impl Transport, m: Message) {
        t.send(&encode(&m).unwrap()).unwrap();
    }

    #[test]
    fn no_retransmission_leaves_local_bytes_zero() {
        let out = scripted(|s| {
            let req = decode(&s.recv(None).unwrap()).unwrap();
            assert!(matches!(req, Message::InferRequest { session_id: 3, original_w: 32, .. }));
            send(s, Message::Answer { session_id: 3, text: "yes".into(), is_final: true, uncertainty_score: 0.1 });
        });
        assert!(out.error.is_none());
        assert_eq!(out.answer.as_deref(), Some("yes"));
        assert_eq!(out.ledger.local_bytes_up, 0);
        assert_eq!(out.ledger.global_bytes_up, 9 + 16 * 16 * 3);
        assert_eq!(out.ledger.question_bytes_up, 5);
        assert_eq!(out.ledger.answer_bytes_down, 3);
        assert!(!out.ledger.retransmitted);
    }

    #[test]
    fn retransmission_with_raw_codec_matches_global_bytes() {
        let out = scripted(|s| {
            s.recv(None).unwrap();
            send(s, Message::RoiRequest { session_id: 3, b1: 5, b2: 2 });
            let local = decode(&s.recv(None).unwrap()).unwrap();
            let Message::LocalImage { image, .. } = local else { panic!("expected local image") };
            assert_eq!((image.width, image.height), (16, 16));
            // box at token (1,1) of side 2 covers original pixels 8..24 on both axes
            let img = image.decode_image().unwrap();
            assert_eq!(img.pixel(0, 0)[0], 8);
            send(s, Message::Answer { session_id: 3, text: "no".into(), is_final: true, uncertainty_score: 0.0 });
        });
        assert!(out.error.is_none(), "{:?}", out.error);
        assert_eq!(out.ledger.local_bytes_up, out.ledger.global_bytes_up);
        assert_eq!(out.ledger.bbox_bytes_down, 8);
        assert_eq!(out.bbox, Some(BoundingBox { b1: 5, b2: 2 }));
    }

    #[test]
    fn malformed_frame_fails_but_flushes_ledger() {
        let out = scripted(|s| {
            s.recv(None).unwrap();
            s.send(b"XXXXgarbage").unwrap();
            let reply = decode(&s.recv(None).unwrap()).unwrap();
            assert!(matches!(reply, Message::ProtocolError { code: code::MALFORMED_FRAME, .. }));
        });
        assert!(matches!(out.error, Some(EdgeError::Decode(WireError::BadMagic(_)))));
        assert_eq!(out.ledger.global_bytes_up, 9 + 16 * 16 * 3);
        assert_eq!(out.ledger.sample_id, "s");
    }

    #[test]
    fn invalid_roi_is_reported() {
        let out = scripted(|s| {
            s.recv(None).unwrap();
            send(s, Message::RoiRequest { session_id: 3, b1: 15, b2: 2 });
            let reply = decode(&s.recv(None).unwrap()).unwrap();
            assert!(matches!(reply, Message::ProtocolError { code: code::INVALID_ROI, .. }));
        });
        assert!(matches!(out.error, Some(EdgeError::InvalidRoi(_))));
    }

    #[test]
    fn server_error_and_closure() {
        let out = scripted(|s| {
            s.recv(None).unwrap();
            send(s, Message::ProtocolError { session_id: 3, code: code::BACKEND_FAULT, detail: "x".into() });
        });
        assert!(matches!(out.error, Some(EdgeError::Server { code: code::BACKEND_FAULT, .. })));

        let out = scripted(|s| {
            s.recv(None).unwrap();
        });
        assert!(matches!(out.error, Some(EdgeError::Transport(TransportError::Closed))));
    }

    #[test]
    fn oversized_original_is_refused() {
        let (edge, _server) = channel_pair();
        let cfg = EdgeConfig {
            max_original: (16, 16),
            ..config()
        };
        let out = run_session(edge, 0, "s", &image(), "q", &cfg);
        assert!(matches!(out.error, Some(EdgeError::TooLarge { .. })));
        assert_eq!(out.ledger.global_bytes_up, 0);
    }
}
