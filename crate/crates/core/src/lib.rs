//! Two-stage edge/server inference for vision-language models.
//!
//! The edge sends a downscaled global image with the question. The server answers
//! and scores its own uncertainty; above the threshold it locates the attended region
//! and asks the edge for a full-resolution crop of just that region, then answers
//! again from both views.
//!
//! Layout, bottom-up: [`uncertainty`] scores and gates, [`roi`] finds the region,
//! [`cost`] models FLOPs and bytes, [`image`] resizes, crops and encodes, [`backend`]
//! abstracts the model, [`protocol`] and [`transport`] carry the exchange, [`edge`]
//! and [`server`] run the two halves of a session, and [`harness`] drives batches,
//! sweeps and statistics.

pub mod backend;
pub mod cost;
pub mod edge;
pub mod harness;
pub mod image;
pub mod protocol;
pub mod roi;
pub mod server;
pub mod transport;
pub mod uncertainty;

pub use backend::{Backend, BackendError, InferenceStep, SampleTrace, SynthParams, SyntheticBackend, TraceBackend};
pub use cost::{CommLedger, FlopsReport, LedgerEntry, LlmShape};
pub use image::{Codec, RawImage};
pub use protocol::{Message, SessionState};
pub use roi::{AttentionTrace, BoundingBox, GridGeometry, PixelRect};
pub use server::{ServerConfig, SessionRecord};
pub use uncertainty::{AggregationPolicy, GateDecision, MetricKind, TokenDistribution, TokenProb};
