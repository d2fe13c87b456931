//! The model boundary.
//!
//! A [`Backend`] stands in for the server-side VLM. It produces per-step token
//! distributions and the starting-token attention traces for stage 1, and refined steps
//! for stage 2 once the local image for a bounding box has arrived. Two implementations
//! ship: [`TraceBackend`] replays recorded [`SampleTrace`]s, and [`SyntheticBackend`]
//! derives everything deterministically from a seed.
//!
//! Samples are addressed by their position in the backend's collection. The protocol's
//! session id carries that position.

mod synthetic;
mod trace_file;

pub use synthetic::{synth_generate, synthetic_image, synthetic_question, SynthParams, SyntheticBackend};
pub use trace_file::{
    load_traces, read_traces, save_traces, traces_to_bytes, write_jsonl, TraceError,
    FORMAT_VERSION, TRACE_MAGIC,
};

use crate::roi::{AttentionTrace, BoundingBox, GridGeometry};
use crate::uncertainty::TokenDistribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on generated tokens per stage.
pub const MAX_OUTPUT_TOKENS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("unknown sample {0}")]
    UnknownSample(u64),
    #[error("stage-2 bounding box {got:?} differs from recorded {expected:?}")]
    TraceBboxMismatch {
        expected: BoundingBox,
        got: BoundingBox,
    },
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
    #[error("backend fault: {0}")]
    Fault(String),
}

/// One greedy decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceStep {
    pub distribution: TokenDistribution,
    pub chosen_token: u32,
}

impl InferenceStep {
    /// Greedy step: the chosen token is the distribution's argmax.
    pub fn greedy(distribution: TokenDistribution) -> Option<Self> {
        let chosen_token = distribution.top()?.token;
        Some(Self {
            distribution,
            chosen_token,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sample_id: String,
    pub original_width: u32,
    pub original_height: u32,
    pub question: String,
    pub vocab_size: u32,
    pub geometry: GridGeometry,
    pub attention_layer: usize,
    pub stage1_steps: Vec<InferenceStep>,
    pub task_attention: AttentionTrace,
    pub generic_attention: AttentionTrace,
    pub recorded_bbox: BoundingBox,
    pub stage2_steps: Vec<InferenceStep>,
    pub stage1_answer: String,
    pub stage2_answer: String,
    pub stage1_correct: bool,
    pub stage2_correct: bool,
}

/// Names the first field of a [`SampleTrace`] that breaks an invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub reason: String,
}

fn violation(field: impl Into<String>, reason: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        reason: reason.into(),
    }
}

fn check_steps(name: &str, steps: &[InferenceStep], vocab: u32) -> Result<(), Violation> {
    if steps.is_empty() {
        return Err(violation(name, "no steps"));
    }
    if steps.len() > MAX_OUTPUT_TOKENS {
        return Err(violation(
            name,
            format!("{} steps exceed the {MAX_OUTPUT_TOKENS}-token limit", steps.len()),
        ));
    }
    for (i, s) in steps.iter().enumerate() {
        if s.distribution.vocab_size() != vocab {
            return Err(violation(format!("{name}[{i}].distribution"), "vocab size differs from trace"));
        }
        if !s.distribution.entries().iter().any(|e| e.token == s.chosen_token) {
            return Err(violation(
                format!("{name}[{i}].chosen_token"),
                format!("token {} not among the distribution entries", s.chosen_token),
            ));
        }
    }
    Ok(())
}

impl SampleTrace {
    pub fn validate(&self) -> Result<(), Violation> {
        if self.original_width == 0 || self.original_height == 0 {
            return Err(violation("original_width", "image dimensions must be positive"));
        }
        if self.vocab_size == 0 {
            return Err(violation("vocab_size", "must be positive"));
        }
        check_steps("stage1_steps", &self.stage1_steps, self.vocab_size)?;
        check_steps("stage2_steps", &self.stage2_steps, self.vocab_size)?;
        let n_v = self.geometry.num_visual_tokens() as usize;
        for (name, att) in [
            ("task_attention", &self.task_attention),
            ("generic_attention", &self.generic_attention),
        ] {
            if att.num_visual_tokens() != n_v {
                return Err(violation(
                    name,
                    format!(
                        "{} visual tokens but geometry has grid_side^2 = {n_v}",
                        att.num_visual_tokens()
                    ),
                ));
            }
        }
        if self.task_attention.num_layers() != self.generic_attention.num_layers() {
            return Err(violation("generic_attention", "layer count differs from task_attention"));
        }
        if self.attention_layer >= self.task_attention.num_layers() {
            return Err(violation(
                "attention_layer",
                format!("{} >= {} layers", self.attention_layer, self.task_attention.num_layers()),
            ));
        }
        self.recorded_bbox
            .validate(self.geometry.grid_side())
            .map_err(|e| violation("recorded_bbox", e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub steps: Vec<InferenceStep>,
    pub task_attention: AttentionTrace,
    pub generic_attention: AttentionTrace,
    pub answer: String,
    pub correct: bool,
    pub geometry: GridGeometry,
    /// Decoder layer the backend's attention is meant to be read from.
    pub attention_layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    pub steps: Vec<InferenceStep>,
    pub answer: String,
    pub correct: bool,
}

/// Server-side model. Implementations hold no per-sample mutable state, so concurrent
/// calls on distinct samples need no coordination.
pub trait Backend: Send + Sync {
    fn num_samples(&self) -> usize;

    fn sample_id(&self, index: u64) -> Result<String, BackendError>;

    fn infer_stage1(&self, index: u64) -> Result<Stage1Output, BackendError>;

    fn infer_stage2(&self, index: u64, bbox: BoundingBox) -> Result<Stage2Output, BackendError>;
}

/// Replays recorded traces. Stage 2 only answers for the recorded bounding box, which
/// makes any divergence in the RoI pipeline visible as [`BackendError::TraceBboxMismatch`].
#[derive(Debug, Clone)]
pub struct TraceBackend {
    traces: Vec<SampleTrace>,
}

impl TraceBackend {
    pub fn new(traces: Vec<SampleTrace>) -> Self {
        Self { traces }
    }

    pub fn traces(&self) -> &[SampleTrace] {
        &self.traces
    }

    fn get(&self, index: u64) -> Result<&SampleTrace, BackendError> {
        usize::try_from(index)
            .ok()
            .and_then(|i| self.traces.get(i))
            .ok_or(BackendError::UnknownSample(index))
    }
}

impl Backend for TraceBackend {
    fn num_samples(&self) -> usize {
        self.traces.len()
    }

    fn sample_id(&self, index: u64) -> Result<String, BackendError> {
        Ok(self.get(index)?.sample_id.clone())
    }

    fn infer_stage1(&self, index: u64) -> Result<Stage1Output, BackendError> {
        let t = self.get(index)?;
        Ok(Stage1Output {
            steps: t.stage1_steps.clone(),
            task_attention: t.task_attention.clone(),
            generic_attention: t.generic_attention.clone(),
            answer: t.stage1_answer.clone(),
            correct: t.stage1_correct,
            geometry: t.geometry,
            attention_layer: t.attention_layer,
        })
    }

    fn infer_stage2(&self, index: u64, bbox: BoundingBox) -> Result<Stage2Output, BackendError> {
        let t = self.get(index)?;
        if bbox != t.recorded_bbox {
            return Err(BackendError::TraceBboxMismatch {
                expected: t.recorded_bbox,
                got: bbox,
            });
        }
        Ok(Stage2Output {
            steps: t.stage2_steps.clone(),
            answer: t.stage2_answer.clone(),
            correct: t.stage2_correct,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SampleTrace {
        let params = SynthParams {
            num_samples: 1,
            ..SynthParams::small()
        };
        synth_generate(&params).unwrap().remove(0)
    }

    #[test]
    fn replay_is_identity() {
        let t = sample();
        let b = TraceBackend::new(vec![t.clone()]);
        let s1 = b.infer_stage1(0).unwrap();
        assert_eq!(s1.steps, t.stage1_steps);
        assert_eq!(s1.task_attention, t.task_attention);
        let s2 = b.infer_stage2(0, t.recorded_bbox).unwrap();
        assert_eq!(s2.steps, t.stage2_steps);
        assert_eq!(s2.answer, t.stage2_answer);
    }

    #[test]
    fn replay_guards_bbox_and_index() {
        let t = sample();
        let b = TraceBackend::new(vec![t.clone()]);
        let other = BoundingBox {
            b1: t.recorded_bbox.b1,
            b2: t.recorded_bbox.b2 + 1,
        };
        assert_eq!(
            b.infer_stage2(0, other),
            Err(BackendError::TraceBboxMismatch {
                expected: t.recorded_bbox,
                got: other
            })
        );
        assert_eq!(b.infer_stage1(1), Err(BackendError::UnknownSample(1)));
    }

    #[test]
    fn validation_names_fields() {
        let mut t = sample();
        t.stage1_steps.clear();
        assert_eq!(t.validate().unwrap_err().field, "stage1_steps");

        let mut t = sample();
        t.geometry = GridGeometry::new(t.geometry.grid_side() + 1, (t.geometry.grid_side() + 1) * 4).unwrap();
        assert_eq!(t.validate().unwrap_err().field, "task_attention");

        let mut t = sample();
        t.stage2_steps[0].chosen_token = u32::MAX;
        assert_eq!(t.validate().unwrap_err().field, "stage2_steps[0].chosen_token");

        let mut t = sample();
        t.recorded_bbox.b2 = 0;
        assert_eq!(t.validate().unwrap_err().field, "recorded_bbox");

        let mut t = sample();
        t.attention_layer = 99;
        assert_eq!(t.validate().unwrap_err().field, "attention_layer");
    }
}
