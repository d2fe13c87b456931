//! Server side of a session: stage-1 inference, gating, region search, stage-2
//! refinement. Protocol sequencing is delegated to [`Session`].

use crate::backend::{Backend, InferenceStep};
use crate::cost::{stage_flops, FlopsReport, LlmShape};
use crate::protocol::wire::{code, decode, encode, Message};
use crate::protocol::{Action, Event, Session, SessionState};
use crate::roi::{self, BoundingBox, DEFAULT_EPSILON};
use crate::transport::{TcpTransport, Transport, TransportError};
use crate::uncertainty::{aggregate, gate, AggregationPolicy, GateDecision, MetricKind, UncertaintyError};
use serde::{Deserialize, Serialize};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;
use thiserror::Error;

pub const DEFAULT_WINDOW_SCALES: [f64; 6] = [1.0, 1.2, 1.4, 1.6, 1.8, 2.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("window scales must be non-empty, finite and positive")]
    Scales,
    #[error("threshold must be >= 0 or +inf, got {0}")]
    Threshold(f64),
    #[error("epsilon must be finite and positive, got {0}")]
    Epsilon(f64),
    #[error("first-k aggregation needs k >= 1")]
    FirstK,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub metric: MetricKind,
    pub threshold: f64,
    pub aggregation: AggregationPolicy,
    /// Decoder layer for the attention maps; `None` uses the one the backend reports.
    pub attention_layer: Option<usize>,
    pub window_scales: Vec<f64>,
    pub llm_shape: LlmShape,
    pub epsilon: f64,
    pub send_nonfinal_answer: bool,
    pub session_timeout: Option<Duration>,
    /// Overrides the gate outcome while still recording the score. Used by sweeps.
    pub force: Option<bool>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::MinEntropy,
            threshold: 0.5,
            aggregation: AggregationPolicy::FullAverage,
            attention_layer: None,
            window_scales: DEFAULT_WINDOW_SCALES.to_vec(),
            llm_shape: LlmShape::llava_7b(),
            epsilon: DEFAULT_EPSILON,
            send_nonfinal_answer: false,
            session_timeout: Some(Duration::from_secs(30)),
            force: None,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window_scales.is_empty() || self.window_scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(ConfigError::Scales);
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(ConfigError::Threshold(self.threshold));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(ConfigError::Epsilon(self.epsilon));
        }
        if self.aggregation == AggregationPolicy::FirstK(0) {
            return Err(ConfigError::FirstK);
        }
        Ok(())
    }
}

/// Scores every step, aggregates and gates.
pub fn decide(steps: &[InferenceStep], config: &ServerConfig) -> Result<(GateDecision, Vec<f64>), UncertaintyError> {
    let scores = steps
        .iter()
        .map(|s| config.metric.score(&s.distribution))
        .collect::<Result<Vec<_>, _>>()?;
    let g = aggregate(&scores, config.aggregation)?;
    Ok((gate(g, config.metric, config.threshold), scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFailure {
    pub code: u16,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: u64,
    pub sample_id: Option<String>,
    pub state: SessionState,
    pub decision: Option<GateDecision>,
    pub step_scores: Vec<f64>,
    pub bbox: Option<BoundingBox>,
    pub flops: Option<FlopsReport>,
    pub stage1_answer: Option<String>,
    pub stage2_answer: Option<String>,
    pub stage1_correct: Option<bool>,
    pub stage2_correct: Option<bool>,
    pub stage2_score: Option<f64>,
    pub failure: Option<SessionFailure>,
}

impl SessionRecord {
    fn empty() -> Self {
        Self {
            session_id: 0,
            sample_id: None,
            state: SessionState::AwaitGlobal,
            decision: None,
            step_scores: Vec::new(),
            bbox: None,
            flops: None,
            stage1_answer: None,
            stage2_answer: None,
            stage1_correct: None,
            stage2_correct: None,
            stage2_score: None,
            failure: None,
        }
    }

    pub fn retransmitted(&self) -> bool {
        self.decision.is_some_and(|d| d.retransmit)
    }

    /// Correctness of the answer delivered to the edge.
    pub fn delivered_correct(&self) -> Option<bool> {
        if self.state != SessionState::Done {
            return None;
        }
        if self.retransmitted() {
            self.stage2_correct
        } else {
            self.stage1_correct
        }
    }

    pub fn delivered_answer(&self) -> Option<&str> {
        if self.state != SessionState::Done {
            return None;
        }
        if self.retransmitted() {
            self.stage2_answer.as_deref()
        } else {
            self.stage1_answer.as_deref()
        }
    }
}

struct Driver<'a, T: Transport> {
    transport: T,
    backend: &'a dyn Backend,
    config: &'a ServerConfig,
    record: SessionRecord,
}

impl<T: Transport> Driver<'_, T> {
    fn stage1(&mut self, sid: u64) -> Event {
        let fault = |code, detail: String| Event::Fault { code, detail };
        let out = match self.backend.infer_stage1(sid) {
            Ok(o) => o,
            Err(e) => return fault(code::BACKEND_FAULT, e.to_string()),
        };
        self.record.sample_id = self.backend.sample_id(sid).ok();
        self.record.stage1_answer = Some(out.answer.clone());
        self.record.stage1_correct = Some(out.correct);
        let (mut decision, scores) = match decide(&out.steps, self.config) {
            Ok(d) => d,
            Err(e) => return fault(code::BACKEND_FAULT, e.to_string()),
        };
        if let Some(f) = self.config.force {
            decision.retransmit = f;
        }
        self.record.decision = Some(decision);
        self.record.step_scores = scores;
        let n_v = u64::from(out.geometry.num_visual_tokens());
        self.record.flops = Some(stage_flops(decision.retransmit, &self.config.llm_shape.with_visual_tokens(n_v)));

        let bbox = if decision.retransmit {
            let layer = self.config.attention_layer.unwrap_or(out.attention_layer);
            let found = roi::locate(
                &out.task_attention,
                &out.generic_attention,
                layer,
                self.config.epsilon,
                &out.geometry,
                &self.config.window_scales,
            );
            match found {
                Ok(b) => Some(b),
                Err(e) => return fault(code::INTERNAL, format!("region search failed: {e}")),
            }
        } else {
            None
        };
        self.record.bbox = bbox;
        Event::Gated {
            decision,
            answer: out.answer,
            bbox,
        }
    }

    fn stage2(&mut self, sid: u64, image: &crate::protocol::ImagePayload) -> Event {
        if let Err(e) = image.decode_image() {
            return Event::Fault {
                code: code::INVALID_IMAGE,
                detail: e.to_string(),
            };
        }
        let bbox = self.record.bbox.expect("stage 2 only follows a region request");
        let out = match self.backend.infer_stage2(sid, bbox) {
            Ok(o) => o,
            Err(e) => {
                return Event::Fault {
                    code: code::BACKEND_FAULT,
                    detail: e.to_string(),
                }
            }
        };
        let score = match decide(&out.steps, self.config) {
            Ok((d, _)) => d.score,
            Err(e) => {
                return Event::Fault {
                    code: code::BACKEND_FAULT,
                    detail: e.to_string(),
                }
            }
        };
        self.record.stage2_answer = Some(out.answer.clone());
        self.record.stage2_correct = Some(out.correct);
        self.record.stage2_score = Some(score);
        Event::Refined {
            answer: out.answer,
            score,
        }
    }

    fn note_failure(&mut self, code: u16, detail: String) {
        if self.record.failure.is_none() {
            self.record.failure = Some(SessionFailure { code, detail });
        }
    }

    fn run(mut self) -> SessionRecord {
        let mut session = Session::new(self.config.send_nonfinal_answer);
        let mut pending: Vec<Event> = Vec::new();
        loop {
            let event = match pending.pop() {
                Some(e) => e,
                None => match self.transport.recv(self.config.session_timeout) {
                    Ok(frame) => match decode(&frame) {
                        Ok(m) => Event::Received(m),
                        Err(e) => Event::Fault {
                            code: code::MALFORMED_FRAME,
                            detail: e.to_string(),
                        },
                    },
                    Err(TransportError::Timeout) => Event::Timeout,
                    Err(TransportError::Malformed(e)) => Event::Fault {
                        code: code::MALFORMED_FRAME,
                        detail: e.to_string(),
                    },
                    Err(e) => {
                        // nobody left to notify
                        self.note_failure(code::INTERNAL, format!("transport: {e}"));
                        self.record.state = SessionState::Failed;
                        return self.record;
                    }
                },
            };
            if let Event::Received(Message::ProtocolError { code, detail, .. }) = &event {
                self.note_failure(*code, format!("peer: {detail}"));
            }
            let (next, actions) = session.step(event);
            session = next;
            self.record.state = session.state();
            if let Some(sid) = session.session_id() {
                self.record.session_id = sid;
            }
            for action in actions {
                match action {
                    Action::RunStage1 { .. } => pending.push(self.stage1(self.record.session_id)),
                    Action::RunStage2 { image } => pending.push(self.stage2(self.record.session_id, &image)),
                    Action::Send(msg) => {
                        if let Message::ProtocolError { code, detail, .. } = &msg {
                            self.note_failure(*code, detail.clone());
                        }
                        let sent = encode(&msg)
                            .map_err(|e| e.to_string())
                            .and_then(|f| self.transport.send(&f).map_err(|e| e.to_string()));
                        if let Err(e) = sent {
                            self.note_failure(code::INTERNAL, format!("send failed: {e}"));
                            self.record.state = SessionState::Failed;
                            return self.record;
                        }
                    }
                    Action::Close => return self.record,
                }
            }
        }
    }
}

/// Serves one session to completion or failure.
pub fn handle_session<T: Transport>(transport: T, backend: &dyn Backend, config: &ServerConfig) -> SessionRecord {
    Driver {
        transport,
        backend,
        config,
        record: SessionRecord::empty(),
    }
    .run()
}

/// Accepts connections and serves each session on its own thread. `on_record` sees
/// every finished session. Returns only on a listener error.
pub fn serve<F>(
    listener: TcpListener,
    backend: Arc<dyn Backend>,
    config: Arc<ServerConfig>,
    on_record: F,
) -> std::io::Result<()>
where
    F: Fn(SessionRecord) + Send + Sync + 'static,
{
    let on_record = Arc::new(on_record);
    for stream in listener.incoming() {
        let stream = stream?;
        let (backend, config, on_record) = (backend.clone(), config.clone(), on_record.clone());
        thread::spawn(move || {
            if let Ok(t) = TcpTransport::new(stream) {
                on_record(handle_session(t, backend.as_ref(), &config));
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{synth_generate, SynthParams, SyntheticBackend, TraceBackend};
    use crate::image::Codec;
    use crate::protocol::ImagePayload;
    use crate::transport::channel_pair;
    use crate::uncertainty::TokenDistribution;

    fn step(pairs: &[(u32, f64)]) -> InferenceStep {
        let d = TokenDistribution::from_pairs(pairs.iter().copied(), 1.0 - pairs.iter().map(|p| p.1).sum::<f64>(), 10).unwrap();
        InferenceStep::greedy(d).unwrap()
    }

    #[test]
    fn decide_examples() {
        let steps = [step(&[(0, 0.5), (1, 0.5)]), step(&[(0, 0.25), (1, 0.25)])];
        let cfg = ServerConfig {
            threshold: 1.5,
            ..ServerConfig::default()
        };
        let (d, s) = decide(&steps, &cfg).unwrap();
        assert_eq!(s, vec![1.0, 2.0]);
        assert_eq!(d.score, 1.5);
        assert!(d.retransmit);

        let first = ServerConfig {
            aggregation: AggregationPolicy::FirstK(1),
            ..cfg.clone()
        };
        assert_eq!(decide(&steps, &first).unwrap().0.score, 1.0);

        let margin = ServerConfig {
            metric: MetricKind::ProbMargin,
            threshold: 0.0,
            ..cfg
        };
        let (d, _) = decide(&steps, &margin).unwrap();
        assert_eq!(d.score, 0.0);
        assert!(d.retransmit);
        assert_eq!(decide(&[], &margin), Err(UncertaintyError::EmptySequence));
    }

    #[test]
    fn config_validation() {
        assert!(ServerConfig::default().validate().is_ok());
        let bad = |c: ServerConfig| c.validate().is_err();
        assert!(bad(ServerConfig { window_scales: vec![], ..Default::default() }));
        assert!(bad(ServerConfig { window_scales: vec![0.0], ..Default::default() }));
        assert!(bad(ServerConfig { threshold: -0.1, ..Default::default() }));
        assert!(bad(ServerConfig { threshold: f64::NAN, ..Default::default() }));
        assert!(bad(ServerConfig { epsilon: 0.0, ..Default::default() }));
        assert!(ServerConfig { threshold: f64::INFINITY, ..Default::default() }.validate().is_ok());
    }

    fn run_one(backend: &dyn Backend, cfg: &ServerConfig, sid: u64, original: (u32, u32)) -> SessionRecord {
        let (mut edge, srv) = channel_pair();
        thread::scope(|s| {
            let h = s.spawn(|| handle_session(srv, backend, cfg));
            let img = crate::image::RawImage::filled(original.0, original.1, [9, 9, 9]).unwrap();
            let payload = ImagePayload::encode_image(&img, Codec::Raw).unwrap();
            let req = Message::InferRequest {
                session_id: sid,
                question: "q".into(),
                original_w: original.0 as u16,
                original_h: original.1 as u16,
                image: payload.clone(),
            };
            edge.send(&encode(&req).unwrap()).unwrap();
            while let Ok(f) = edge.recv(Some(Duration::from_secs(5))) {
                match decode(&f).unwrap() {
                    Message::RoiRequest { .. } => {
                        let m = Message::LocalImage { session_id: sid, image: payload.clone() };
                        edge.send(&encode(&m).unwrap()).unwrap();
                    }
                    Message::Answer { is_final: true, .. } | Message::ProtocolError { .. } => break,
                    _ => {}
                }
            }
            h.join().unwrap()
        })
    }

    #[test]
    fn threshold_endpoints() {
        let backend = SyntheticBackend::new(SynthParams::small()).unwrap();
        let never = ServerConfig { threshold: f64::INFINITY, ..Default::default() };
        let always = ServerConfig { threshold: 0.0, ..Default::default() };
        for sid in 0..4 {
            let r = run_one(&backend, &never, sid, (64, 48));
            assert_eq!(r.state, SessionState::Done);
            assert!(!r.retransmitted());
            assert_eq!(r.flops.unwrap().second_stage, 0);
            let r = run_one(&backend, &always, sid, (64, 48));
            assert_eq!(r.state, SessionState::Done);
            assert!(r.retransmitted());
            assert!(r.flops.unwrap().second_stage > 0);
            assert!(r.bbox.is_some());
        }
    }

    #[test]
    fn flops_use_sample_geometry() {
        let backend = SyntheticBackend::new(SynthParams::small()).unwrap();
        let r = run_one(&backend, &ServerConfig { threshold: f64::INFINITY, ..Default::default() }, 0, (64, 48));
        let shape = LlmShape::llava_7b().with_visual_tokens(64);
        assert_eq!(r.flops.unwrap().initial, crate::cost::prefill_flops(64, &shape));
    }

    #[test]
    fn replay_reproduces_recorded_bbox() {
        let traces = synth_generate(&SynthParams::small()).unwrap();
        let backend = TraceBackend::new(traces.clone());
        let cfg = ServerConfig { threshold: 0.0, ..Default::default() };
        for (i, t) in traces.iter().enumerate() {
            let r = run_one(&backend, &cfg, i as u64, (64, 48));
            assert_eq!(r.state, SessionState::Done, "{:?}", r.failure);
            assert_eq!(r.bbox, Some(t.recorded_bbox));
            assert_eq!(r.delivered_answer(), Some(t.stage2_answer.as_str()));
        }
    }

    #[test]
    fn bbox_mismatch_is_backend_fault() {
        let mut traces = synth_generate(&SynthParams::small()).unwrap();
        let g = traces[0].geometry.grid_side();
        traces[0].recorded_bbox = if traces[0].recorded_bbox == BoundingBox::full(g) {
            BoundingBox { b1: 0, b2: 1 }
        } else {
            BoundingBox::full(g)
        };
        let backend = TraceBackend::new(traces);
        let r = run_one(&backend, &ServerConfig { threshold: 0.0, ..Default::default() }, 0, (64, 48));
        assert_eq!(r.state, SessionState::Failed);
        assert_eq!(r.failure.unwrap().code, code::BACKEND_FAULT);
    }

    #[test]
    fn unknown_sample_is_backend_fault() {
        let backend = SyntheticBackend::new(SynthParams::small()).unwrap();
        let r = run_one(&backend, &ServerConfig::default(), 999, (64, 48));
        assert_eq!(r.state, SessionState::Failed);
        assert_eq!(r.failure.unwrap().code, code::BACKEND_FAULT);
    }

    #[test]
    fn timeout_fails_session() {
        let backend = SyntheticBackend::new(SynthParams::small()).unwrap();
        let cfg = ServerConfig {
            session_timeout: Some(Duration::from_millis(20)),
            ..Default::default()
        };
        let (_edge, srv) = channel_pair();
        let r = handle_session(srv, &backend, &cfg);
        assert_eq!(r.state, SessionState::Failed);
        assert_eq!(r.failure.unwrap().code, code::TIMEOUT);
    }
}
