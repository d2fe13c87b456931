//! Server-side session state machine.
//!
//! ```text
//! AwaitGlobal --InferRequest--> InitialInference --gate: keep----> Done
//!                                      |
//!                                      +--gate: retransmit--> AwaitLocal --LocalImage--> RefinedInference --> Done
//! any --illegal event / fault / timeout--> Failed
//! ```
//!
//! [`Session::step`] is a pure transition: it consumes the session and returns the
//! successor together with the actions the driver must carry out.

use super::wire::{code, ImagePayload, Message};
use crate::roi::BoundingBox;
use crate::uncertainty::GateDecision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionState {
    AwaitGlobal,
    InitialInference,
    AwaitLocal,
    RefinedInference,
    Done,
    Failed,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Received(Message),
    /// Stage 1 finished and the gate was evaluated. `bbox` is required when the
    /// decision asks for retransmission.
    Gated {
        decision: GateDecision,
        answer: String,
        bbox: Option<BoundingBox>,
    },
    /// Stage 2 finished.
    Refined { answer: String, score: f64 },
    Timeout,
    /// The driver could not carry out an action.
    Fault { code: u16, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    RunStage1 {
        question: String,
        original_w: u16,
        original_h: u16,
        image: ImagePayload,
    },
    RunStage2 { image: ImagePayload },
    Send(Message),
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Session {
    state: SessionState,
    session_id: Option<u64>,
    send_nonfinal_answer: bool,
}

impl Session {
    pub fn new(send_nonfinal_answer: bool) -> Self {
        Self {
            state: SessionState::AwaitGlobal,
            session_id: None,
            send_nonfinal_answer,
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn session_id(&self) -> Option<u64> {
        self.session_id
    }

    fn fail(self, sid: u64, code: u16, detail: impl Into<String>) -> (Self, Vec<Action>) {
        let err = Message::ProtocolError {
            session_id: sid,
            code,
            detail: detail.into(),
        };
        (
            Self {
                state: SessionState::Failed,
                ..self
            },
            vec![Action::Send(err), Action::Close],
        )
    }

    fn to(self, state: SessionState, actions: Vec<Action>) -> (Self, Vec<Action>) {
        (Self { state, ..self }, actions)
    }

    pub fn step(self, event: Event) -> (Self, Vec<Action>) {
        use SessionState::*;
        let sid = self.session_id.unwrap_or(0);

        if self.state.is_terminal() {
            return self.fail(sid, code::SESSION_CLOSED, format!("event after session ended ({:?})", self.state));
        }

        match (self.state, event) {
            // the peer already gave up; nothing to answer
            (_, Event::Received(Message::ProtocolError { .. })) => self.to(Failed, vec![Action::Close]),

            (_, Event::Received(m)) if self.session_id.is_some_and(|s| s != m.session_id()) => {
                let detail = format!("{} for session {} on session {sid}", m.name(), m.session_id());
                self.fail(sid, code::SESSION_MISMATCH, detail)
            }

            (
                AwaitGlobal,
                Event::Received(Message::InferRequest {
                    session_id,
                    question,
                    original_w,
                    original_h,
                    image,
                }),
            ) => {
                let next = Self {
                    session_id: Some(session_id),
                    ..self
                };
                next.to(
                    InitialInference,
                    vec![Action::RunStage1 {
                        question,
                        original_w,
                        original_h,
                        image,
                    }],
                )
            }

            (InitialInference, Event::Gated { decision, answer, bbox }) => {
                if !decision.retransmit {
                    let a = Message::Answer {
                        session_id: sid,
                        text: answer,
                        is_final: true,
                        uncertainty_score: decision.score,
                    };
                    return self.to(Done, vec![Action::Send(a), Action::Close]);
                }
                let Some(b) = bbox else {
                    return self.fail(sid, code::INTERNAL, "retransmission requested without a bounding box");
                };
                let mut actions = Vec::with_capacity(2);
                if self.send_nonfinal_answer {
                    actions.push(Action::Send(Message::Answer {
                        session_id: sid,
                        text: answer,
                        is_final: false,
                        uncertainty_score: decision.score,
                    }));
                }
                actions.push(Action::Send(Message::RoiRequest {
                    session_id: sid,
                    b1: b.b1,
                    b2: b.b2,
                }));
                self.to(AwaitLocal, actions)
            }

            (AwaitLocal, Event::Received(Message::LocalImage { image, .. })) => {
                self.to(RefinedInference, vec![Action::RunStage2 { image }])
            }

            (RefinedInference, Event::Refined { answer, score }) => {
                let a = Message::Answer {
                    session_id: sid,
                    text: answer,
                    is_final: true,
                    uncertainty_score: score,
                };
                self.to(Done, vec![Action::Send(a), Action::Close])
            }

            (_, Event::Fault { code, detail }) => self.fail(sid, code, detail),

            (state, Event::Timeout) => self.fail(sid, code::TIMEOUT, format!("timed out in {state:?}")),

            (state, Event::Received(m)) => {
                let reply_to = self.session_id.unwrap_or(m.session_id());
                let detail = format!("unexpected {} in {state:?}", m.name());
                self.fail(reply_to, code::OUT_OF_ORDER, detail)
            }

            (state, other) => {
                let detail = format!("unexpected local event {other:?} in {state:?}");
                self.fail(sid, code::OUT_OF_ORDER, detail)
            }
        }
    }
}
