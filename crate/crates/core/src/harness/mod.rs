//! Batch driver: pushes samples through edge and server over a real transport,
//! sweeps thresholds and computes the summary statistics.

mod report;
mod separability;
mod sweep;

pub use report::{fmt_f64, write_records_csv, write_sweep_csv};
pub use separability::{separability, separability_from_scores, SeparabilityReport, DEFAULT_BINS};
pub use sweep::{summarize, sweep, RandomBaseline, SweepOutput, SweepResult, SweepRow};

use crate::backend::{synthetic_image, synthetic_question, Backend, SampleTrace, SynthParams};
use crate::cost::{CommLedger, LedgerEntry};
use crate::edge::{run_session, EdgeConfig};
use crate::image::Codec;
use crate::protocol::SessionState;
use crate::roi::GridGeometry;
use crate::server::{handle_session, ConfigError, ServerConfig, SessionRecord};
use crate::transport::{channel_pair, TcpTransport, Transport, TransportError};
use std::net::TcpListener;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("transport setup failed: {0}")]
    Transport(#[from] TransportError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("thresholds must be sorted ascending and each >= 0 or +inf")]
    Thresholds,
    #[error("no sample completed successfully")]
    NoSuccessfulSamples,
    #[error("separability needs both correct and incorrect samples")]
    SingleClassOnly,
    #[error("bin count must be at least 1")]
    ZeroBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TransportMode {
    #[default]
    InProcess,
    TcpLoopback,
}

impl FromStr for TransportMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" | "in-process" => Ok(Self::InProcess),
            "tcp" => Ok(Self::TcpLoopback),
            _ => Err(format!("unknown transport {s:?} (expected inproc or tcp)")),
        }
    }
}

/// What the edge needs to know to ask about one sample. The original image is
/// synthesized on demand from the sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSample {
    pub session_id: u64,
    pub sample_id: String,
    pub question: String,
    pub original_width: u32,
    pub original_height: u32,
    pub geometry: GridGeometry,
}

impl EdgeSample {
    pub fn from_trace(session_id: u64, t: &SampleTrace) -> Self {
        Self {
            session_id,
            sample_id: t.sample_id.clone(),
            question: t.question.clone(),
            original_width: t.original_width,
            original_height: t.original_height,
            geometry: t.geometry,
        }
    }
}

pub fn samples_from_traces(traces: &[SampleTrace]) -> Vec<EdgeSample> {
    traces
        .iter()
        .enumerate()
        .map(|(i, t)| EdgeSample::from_trace(i as u64, t))
        .collect()
}

/// Samples matching what [`crate::backend::SyntheticBackend`] serves for `params`.
pub fn samples_from_synthetic(params: &SynthParams) -> Result<Vec<EdgeSample>, crate::backend::BackendError> {
    let geometry = params.geometry()?;
    Ok((0..params.num_samples as u64)
        .map(|i| EdgeSample {
            session_id: i,
            sample_id: format!("syn{i:06}"),
            question: synthetic_question(i),
            original_width: params.original_width,
            original_height: params.original_height,
            geometry,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    pub server: ServerConfig,
    pub codec: Codec,
    pub transport: TransportMode,
    /// Worker threads; 0 picks the available parallelism.
    pub workers: usize,
    pub edge_timeout: Option<Duration>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            server: ServerConfig::default(),
            codec: Codec::Raw,
            transport: TransportMode::InProcess,
            workers: 0,
            edge_timeout: Some(Duration::from_secs(30)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub session_id: u64,
    pub sample_id: String,
    pub record: SessionRecord,
    pub ledger: LedgerEntry,
    pub edge_error: Option<String>,
}

impl SampleResult {
    pub fn succeeded(&self) -> bool {
        self.record.state == SessionState::Done && self.edge_error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchResult {
    /// In input order.
    pub samples: Vec<SampleResult>,
}

impl BatchResult {
    pub fn succeeded(&self) -> impl Iterator<Item = &SampleResult> {
        self.samples.iter().filter(|s| s.succeeded())
    }

    pub fn failed(&self) -> impl Iterator<Item = &SampleResult> {
        self.samples.iter().filter(|s| !s.succeeded())
    }

    /// Ledger over successful samples.
    pub fn ledger(&self) -> CommLedger {
        self.succeeded().map(|s| s.ledger.clone()).collect()
    }
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let n = if requested == 0 {
        thread::available_parallelism().map_or(4, |n| n.get())
    } else {
        requested
    };
    n.clamp(1, jobs.max(1))
}

fn run_one(
    sample: &EdgeSample,
    backend: &dyn Backend,
    config: &BatchConfig,
    listener: Option<&Mutex<TcpListener>>,
) -> Result<SampleResult, HarnessError> {
    let edge_cfg = EdgeConfig {
        codec: config.codec,
        geometry: sample.geometry,
        timeout: config.edge_timeout,
        ..EdgeConfig::default()
    };
    let original = synthetic_image(&sample.sample_id, sample.original_width, sample.original_height);
    let ask = |t| {
        run_session(
            t,
            sample.session_id,
            &sample.sample_id,
            &original,
            &sample.question,
            &edge_cfg,
        )
    };
    let (edge_end, server_end): (Box<dyn Transport>, Box<dyn Transport>) = match listener {
        None => {
            let (e, s) = channel_pair();
            (Box::new(e), Box::new(s))
        }
        Some(listener) => {
            let l = listener.lock().expect("listener lock");
            let addr = l.local_addr()?;
            let e = TcpTransport::connect(&addr.to_string())?;
            let (stream, _) = l.accept()?;
            (Box::new(e), Box::new(TcpTransport::new(stream)?))
        }
    };
    let (record, outcome) = thread::scope(|s| {
        let server = s.spawn(|| handle_session(server_end, backend, &config.server));
        let outcome = ask(edge_end);
        (server.join().expect("server session panicked"), outcome)
    });
    Ok(SampleResult {
        session_id: sample.session_id,
        sample_id: sample.sample_id.clone(),
        record,
        ledger: outcome.ledger,
        edge_error: outcome.error.map(|e| e.to_string()),
    })
}

/// Runs every sample through a full session. Per-sample failures are recorded, not
/// propagated; only harness setup errors abort the batch.
pub fn run_batch(samples: &[EdgeSample], backend: &dyn Backend, config: &BatchConfig) -> Result<BatchResult, HarnessError> {
    config.server.validate()?;
    if samples.is_empty() {
        return Ok(BatchResult::default());
    }
    let listener = match config.transport {
        TransportMode::InProcess => None,
        TransportMode::TcpLoopback => Some(Mutex::new(TcpListener::bind("127.0.0.1:0")?)),
    };
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<SampleResult>>> = samples.iter().map(|_| Mutex::new(None)).collect();
    let first_error: Mutex<Option<HarnessError>> = Mutex::new(None);
    thread::scope(|s| {
        for _ in 0..worker_count(config.workers, samples.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= samples.len() || first_error.lock().unwrap().is_some() {
                    break;
                }
                match run_one(&samples[i], backend, config, listener.as_ref()) {
                    Ok(r) => *slots[i].lock().unwrap() = Some(r),
                    Err(e) => {
                        first_error.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(BatchResult {
        samples: slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot filled"))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::SyntheticBackend;

    #[test]
    fn empty_batch() {
        let backend = SyntheticBackend::new(SynthParams::small()).unwrap();
        let r = run_batch(&[], &backend, &BatchConfig::default()).unwrap();
        assert!(r.samples.is_empty());
    }

    #[test]
    fn order_is_input_order() {
        let params = SynthParams::small();
        let backend = SyntheticBackend::new(params.clone()).unwrap();
        let mut samples = samples_from_synthetic(&params).unwrap();
        samples.reverse();
        let cfg = BatchConfig { workers: 3, ..Default::default() };
        let r = run_batch(&samples, &backend, &cfg).unwrap();
        let ids: Vec<u64> = r.samples.iter().map(|s| s.session_id).collect();
        let want: Vec<u64> = samples.iter().map(|s| s.session_id).collect();
        assert_eq!(ids, want);
        assert!(r.samples.iter().all(SampleResult::succeeded));
    }

    #[test]
    fn transport_mode_names() {
        assert_eq!("tcp".parse::<TransportMode>().unwrap(), TransportMode::TcpLoopback);
        assert_eq!("inproc".parse::<TransportMode>().unwrap(), TransportMode::InProcess);
        assert!("udp".parse::<TransportMode>().is_err());
    }
}
