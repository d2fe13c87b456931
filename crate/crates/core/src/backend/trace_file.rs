//! Binary trace container.
//!
//! ```text
//! file    := "VLTR" version:u16 count:u32 record*
//! record  := len:u32 body[len]
//! body    := sample_id:str original_w:u32 original_h:u32 question:str vocab:u32
//!            grid_side:u32 encoder_res:u32 attention_layer:u32
//!            stage1:steps task:attn generic:attn b1:u32 b2:u32 stage2:steps
//!            stage1_answer:str stage2_answer:str stage1_correct:u8 stage2_correct:u8
//! steps   := n:u32 (chosen:u32 residual:f64 k:u32 (token:u32 prob:f64)^k)^n
//! attn    := layers:u32 n_v:u32 f64^(layers*n_v)
//! str     := len:u32 utf8[len]
//! ```
//!
//! Integers are big-endian, reals are binary64 big-endian.

use super::{InferenceStep, SampleTrace};
use crate::roi::{AttentionTrace, BoundingBox, GridGeometry};
use crate::uncertainty::{TokenDistribution, TokenProb};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const TRACE_MAGIC: &[u8; 4] = b"VLTR";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("trace format version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u16, expected: u16 },
    #[error("sample {index} ({sample_id}): invalid {field}: {reason}")]
    Validation {
        index: usize,
        sample_id: String,
        field: String,
        reason: String,
    },
    #[error("json export failed: {0}")]
    Json(#[from] serde_json::Error),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("trace field longer than u32::MAX"));
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn steps(&mut self, steps: &[InferenceStep]) {
        self.len(steps.len());
        for s in steps {
            self.u32(s.chosen_token);
            self.f64(s.distribution.residual());
            self.len(s.distribution.entries().len());
            for e in s.distribution.entries() {
                self.u32(e.token);
                self.f64(e.prob);
            }
        }
    }
    fn attention(&mut self, a: &AttentionTrace) {
        self.len(a.num_layers());
        self.len(a.num_visual_tokens());
        for v in a.layers().iter().flatten() {
            self.f64(*v);
        }
    }
}

fn encode_record(t: &SampleTrace) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.str(&t.sample_id);
    w.u32(t.original_width);
    w.u32(t.original_height);
    w.str(&t.question);
    w.u32(t.vocab_size);
    w.u32(t.geometry.grid_side());
    w.u32(t.geometry.encoder_resolution());
    w.len(t.attention_layer);
    w.steps(&t.stage1_steps);
    w.attention(&t.task_attention);
    w.attention(&t.generic_attention);
    w.u32(t.recorded_bbox.b1);
    w.u32(t.recorded_bbox.b2);
    w.steps(&t.stage2_steps);
    w.str(&t.stage1_answer);
    w.str(&t.stage2_answer);
    w.u8(u8::from(t.stage1_correct));
    w.u8(u8::from(t.stage2_correct));
    w.buf
}

/// Serialises a collection into the container format.
pub fn traces_to_bytes(traces: &[SampleTrace]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_be_bytes());
    out.extend_from_slice(&u32::try_from(traces.len()).expect("too many samples").to_be_bytes());
    for t in traces {
        let rec = encode_record(t);
        out.extend_from_slice(&u32::try_from(rec.len()).expect("record too large").to_be_bytes());
        out.extend(rec);
    }
    out
}

pub fn save_traces(path: impl AsRef<Path>, traces: &[SampleTrace]) -> Result<(), TraceError> {
    std::fs::write(path, traces_to_bytes(traces))?;
    Ok(())
}

/// Human-readable export, one JSON object per sample.
pub fn write_jsonl(mut out: impl Write, traces: &[SampleTrace]) -> Result<(), TraceError> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Field-level failure inside a record, before positions are attached.
enum Fault {
    Parse(usize, String),
    Field(String, String),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf[0]` within the file.
    base: usize,
}

impl<'a> Reader<'a> {
    fn parse<T>(&self, reason: impl Into<String>) -> Result<T, Fault> {
        Err(Fault::Parse(self.base + self.pos, reason.into()))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Fault> {
        if self.buf.len() - self.pos < n {
            return self.parse(format!(
                "unexpected end of data reading {what} ({n} bytes needed, {} left)",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, Fault> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, Fault> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, Fault> {
        Ok(f64::from_be_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// Reads a count and checks that `count * min_item_bytes` can still fit.
    fn count(&mut self, what: &str, min_item_bytes: usize) -> Result<usize, Fault> {
        let n = self.u32(what)? as usize;
        if n.saturating_mul(min_item_bytes) > self.buf.len() - self.pos {
            return self.parse(format!("{what} count {n} exceeds remaining record bytes"));
        }
        Ok(n)
    }

    fn bool(&mut self, what: &str) -> Result<bool, Fault> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => {
                self.pos -= 1;
                self.parse(format!("{what} must be 0 or 1, got {v}"))
            }
        }
    }

    fn str(&mut self, what: &str) -> Result<String, Fault> {
        let n = self.count(what, 1)?;
        let start = self.pos;
        let bytes = self.take(n, what)?;
        match std::str::from_utf8(bytes) {
            Ok(s) => Ok(s.to_owned()),
            Err(e) => Err(Fault::Parse(self.base + start + e.valid_up_to(), format!("{what} is not UTF-8"))),
        }
    }

    fn steps(&mut self, what: &str, vocab: u32) -> Result<Vec<InferenceStep>, Fault> {
        let n = self.count(what, 16)?;
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let chosen_token = self.u32("chosen token")?;
            let residual = self.f64("residual mass")?;
            let k = self.count("entry", 12)?;
            let mut entries = Vec::with_capacity(k);
            for _ in 0..k {
                let token = self.u32("token id")?;
                let prob = self.f64("probability")?;
                entries.push(TokenProb { token, prob });
            }
            let distribution = TokenDistribution::new(entries, residual, vocab)
                .map_err(|e| Fault::Field(format!("{what}[{i}].distribution"), e.to_string()))?;
            steps.push(InferenceStep {
                distribution,
                chosen_token,
            });
        }
        Ok(steps)
    }

    fn attention(&mut self, what: &str) -> Result<AttentionTrace, Fault> {
        let layers = self.count(what, 0)?;
        let n_v = self.u32("visual token count")? as usize;
        let total = layers.saturating_mul(n_v);
        if total.saturating_mul(8) > self.buf.len() - self.pos {
            return self.parse(format!("{what} of {layers}x{n_v} exceeds record"));
        }
        let mut rows = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut row = Vec::with_capacity(n_v);
            for _ in 0..n_v {
                row.push(self.f64("attention value")?);
            }
            rows.push(row);
        }
        AttentionTrace::new(rows).map_err(|e| Fault::Field(what.into(), e.to_string()))
    }
}

fn decode_record(r: &mut Reader<'_>) -> Result<SampleTrace, Fault> {
    let sample_id = r.str("sample_id")?;
    let original_width = r.u32("original_width")?;
    let original_height = r.u32("original_height")?;
    let question = r.str("question")?;
    let vocab_size = r.u32("vocab_size")?;
    let grid_side = r.u32("grid_side")?;
    let encoder_res = r.u32("encoder_resolution")?;
    let geometry = GridGeometry::new(grid_side, encoder_res)
        .map_err(|e| Fault::Field("geometry".into(), e.to_string()))?;
    let attention_layer = r.u32("attention_layer")? as usize;
    let stage1_steps = r.steps("stage1_steps", vocab_size)?;
    let task_attention = r.attention("task_attention")?;
    let generic_attention = r.attention("generic_attention")?;
    let recorded_bbox = BoundingBox {
        b1: r.u32("recorded_bbox.b1")?,
        b2: r.u32("recorded_bbox.b2")?,
    };
    let stage2_steps = r.steps("stage2_steps", vocab_size)?;
    let stage1_answer = r.str("stage1_answer")?;
    let stage2_answer = r.str("stage2_answer")?;
    let stage1_correct = r.bool("stage1_correct")?;
    let stage2_correct = r.bool("stage2_correct")?;
    Ok(SampleTrace {
        sample_id,
        original_width,
        original_height,
        question,
        vocab_size,
        geometry,
        attention_layer,
        stage1_steps,
        task_attention,
        generic_attention,
        recorded_bbox,
        stage2_steps,
        stage1_answer,
        stage2_answer,
        stage1_correct,
        stage2_correct,
    })
}

/// Parses and validates a container held in memory.
pub fn read_traces(bytes: &[u8]) -> Result<Vec<SampleTrace>, TraceError> {
    let lift = |f: Fault| match f {
        Fault::Parse(offset, reason) => TraceError::Parse { offset, reason },
        Fault::Field(field, reason) => TraceError::Parse { offset: 0, reason: format!("{field}: {reason}") },
    };
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        base: 0,
    };
    let magic = r.take(4, "magic").map_err(lift)?;
    if magic != TRACE_MAGIC {
        return Err(TraceError::Parse {
            offset: 0,
            reason: format!("bad magic {magic:02x?}"),
        });
    }
    let version = u16::from_be_bytes(r.take(2, "version").map_err(lift)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(TraceError::SchemaVersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.count("sample", 4).map_err(lift)?;
    let mut traces = Vec::with_capacity(count);
    for index in 0..count {
        let len = r.u32("record length").map_err(lift)? as usize;
        let start = r.pos;
        let body = r.take(len, "record").map_err(lift)?;
        let mut rec = Reader {
            buf: body,
            pos: 0,
            base: start,
        };
        let trace = decode_record(&mut rec).map_err(|f| match f {
            Fault::Parse(offset, reason) => TraceError::Parse { offset, reason },
            Fault::Field(field, reason) => TraceError::Validation {
                index,
                sample_id: String::new(),
                field,
                reason,
            },
        })?;
        if rec.pos != body.len() {
            return Err(TraceError::Parse {
                offset: start + rec.pos,
                reason: format!("{} unread bytes at end of record {index}", body.len() - rec.pos),
            });
        }
        trace.validate().map_err(|v| TraceError::Validation {
            index,
            sample_id: trace.sample_id.clone(),
            field: v.field,
            reason: v.reason,
        })?;
        traces.push(trace);
    }
    if r.pos != bytes.len() {
        return Err(TraceError::Parse {
            offset: r.pos,
            reason: "trailing bytes after last record".into(),
        });
    }
    Ok(traces)
}

pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<SampleTrace>, TraceError> {
    read_traces(&std::fs::read(path)?)
}
