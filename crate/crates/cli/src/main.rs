mod config;

use clap::{Args, Parser, Subcommand};
use config::FileConfig;
use roigate_core::backend::{load_traces, save_traces, synth_generate, synthetic_image, write_jsonl};
use roigate_core::edge::{run_session, EdgeConfig};
use roigate_core::harness::{
    fmt_f64, run_batch, samples_from_synthetic, samples_from_traces, separability, summarize, sweep,
    write_records_csv, write_sweep_csv, BatchConfig, EdgeSample, RandomBaseline, SweepResult, TransportMode,
};
use roigate_core::server::handle_session;
use roigate_core::transport::TcpTransport;
use roigate_core::{AggregationPolicy, Backend, Codec, MetricKind, ServerConfig, SyntheticBackend, TraceBackend};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::thread;

type Result<T, E = String> = std::result::Result<T, E>;

/// Uncertainty-gated edge/server VLM inference simulator.
#[derive(Parser)]
#[command(name = "roigate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace file.
    GenTraces {
        #[command(flatten)]
        source: Source,
        /// Trace container to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write the traces as JSON lines.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Run every sample once at one threshold.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        gate: GateFlags,
        #[command(flatten)]
        run: RunFlags,
        /// Summary CSV (one row); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sample records CSV.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Sweep thresholds and write the trade-off curve.
    Sweep {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        gate: GateFlags,
        #[command(flatten)]
        run: RunFlags,
        /// Ascending thresholds, comma separated; `inf` is allowed.
        #[arg(long, value_delimiter = ',', required = true)]
        thresholds: Vec<f64>,
        /// Sweep CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Random-retransmission baseline at each row's cost. Needs thresholds 0 and inf.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Compare stage-1 scores of correct and incorrect samples.
    Separability {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        gate: GateFlags,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value_t = roigate_core::harness::DEFAULT_BINS)]
        bins: usize,
        /// Normalized histograms of both classes.
        #[arg(long)]
        hist: Option<PathBuf>,
    },
    /// Serve sessions over TCP.
    Serve {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        gate: GateFlags,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Exit after this many sessions.
        #[arg(long)]
        max_sessions: Option<usize>,
    },
    /// Ask a running server about every sample, one connection per sample.
    Edge {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        connect: String,
        #[arg(long)]
        codec: Option<Codec>,
        /// Per-sample results CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Source {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replay this trace file instead of generating synthetic samples.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Synthetic seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic sample count.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct GateFlags {
    #[arg(long)]
    metric: Option<MetricKind>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    aggregation: Option<AggregationPolicy>,
    /// Decoder layer for attention; defaults to the backend's.
    #[arg(long)]
    layer: Option<usize>,
    /// Send the stage-1 answer before asking for the region.
    #[arg(long)]
    send_nonfinal: bool,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    transport: Option<TransportMode>,
    #[arg(long)]
    codec: Option<Codec>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

struct Loaded {
    file: FileConfig,
    backend: Arc<dyn Backend>,
    samples: Vec<EdgeSample>,
}

impl Source {
    fn load(&self) -> Result<Loaded> {
        let mut file = FileConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            file.synthetic.seed = seed;
        }
        if let Some(n) = self.samples {
            file.synthetic.num_samples = n;
        }
        let (backend, samples): (Arc<dyn Backend>, _) = match &self.trace {
            Some(path) => {
                let traces = load_traces(path).map_err(|e| format!("{}: {e}", path.display()))?;
                let samples = samples_from_traces(&traces);
                (Arc::new(TraceBackend::new(traces)), samples)
            }
            None => {
                let samples = samples_from_synthetic(&file.synthetic).map_err(|e| e.to_string())?;
                let backend = SyntheticBackend::new(file.synthetic.clone()).map_err(|e| e.to_string())?;
                (Arc::new(backend), samples)
            }
        };
        Ok(Loaded { file, backend, samples })
    }
}

impl GateFlags {
    fn apply(&self, file: &FileConfig) -> Result<ServerConfig> {
        let mut cfg = file.server()?;
        if let Some(m) = self.metric {
            cfg.metric = m;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if let Some(a) = self.aggregation {
            cfg.aggregation = a;
        }
        if self.layer.is_some() {
            cfg.attention_layer = self.layer;
        }
        cfg.send_nonfinal_answer |= self.send_nonfinal;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

impl RunFlags {
    fn batch(&self, file: &FileConfig, server: ServerConfig) -> Result<BatchConfig> {
        Ok(BatchConfig {
            server,
            codec: match self.codec {
                Some(c) => c,
                None => file.codec()?,
            },
            transport: match self.transport {
                Some(t) => t,
                None => file.transport()?,
            },
            workers: self.workers.unwrap_or(file.batch.workers),
            edge_timeout: file.edge_timeout()?,
        })
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| format!("{}: {e}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn gen_traces(source: &Source, out: &Path, jsonl: Option<&Path>) -> Result<()> {
    let mut file = FileConfig::load(source.config.as_deref())?;
    if let Some(seed) = source.seed {
        file.synthetic.seed = seed;
    }
    if let Some(n) = source.samples {
        file.synthetic.num_samples = n;
    }
    let traces = synth_generate(&file.synthetic).map_err(|e| e.to_string())?;
    save_traces(out, &traces).map_err(|e| format!("{}: {e}", out.display()))?;
    if let Some(p) = jsonl {
        write_jsonl(output(Some(p))?, &traces).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    eprintln!("wrote {} traces to {}", traces.len(), out.display());
    Ok(())
}

fn report_failures(failed: usize, total: usize) {
    if failed > 0 {
        eprintln!("{failed} of {total} sessions failed; see the records for details");
    }
}

fn simulate(source: &Source, gate: &GateFlags, run: &RunFlags, out: Option<&Path>, records: Option<&Path>) -> Result<()> {
    let l = source.load()?;
    let cfg = run.batch(&l.file, gate.apply(&l.file)?)?;
    let batch = run_batch(&l.samples, l.backend.as_ref(), &cfg).map_err(|e| e.to_string())?;
    report_failures(batch.failed().count(), batch.samples.len());
    if let Some(p) = records {
        write_records_csv(output(Some(p))?, &batch.samples).map_err(|e| e.to_string())?;
    }
    let row = summarize(cfg.server.threshold, &batch.samples).map_err(|e| e.to_string())?;
    write_sweep_csv(output(out)?, &SweepResult { rows: vec![row] }).map_err(|e| e.to_string())
}

fn write_baseline(path: &Path, result: &SweepResult) -> Result<()> {
    let base = RandomBaseline::from_sweep(result)
        .ok_or("the random baseline needs rows at threshold 0 and inf")?;
    let mut w = output(Some(path))?;
    let io = |e: io::Error| format!("{}: {e}", path.display());
    writeln!(w, "threshold,additional_comm_cost,accuracy,baseline_accuracy").map_err(io)?;
    for r in &result.rows {
        let cols = [r.threshold, r.additional_comm_cost, r.accuracy, base.accuracy_at(r.additional_comm_cost)];
        writeln!(w, "{}", cols.map(fmt_f64).join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn run_sweep(
    source: &Source,
    gate: &GateFlags,
    run: &RunFlags,
    thresholds: &[f64],
    out: Option<&Path>,
    baseline: Option<&Path>,
) -> Result<()> {
    let l = source.load()?;
    let cfg = run.batch(&l.file, gate.apply(&l.file)?)?;
    let swept = sweep(&l.samples, l.backend.as_ref(), &cfg, thresholds).map_err(|e| e.to_string())?;
    report_failures(swept.initial.failed().count(), swept.initial.samples.len());
    if let Some(p) = baseline {
        write_baseline(p, &swept.result)?;
    }
    write_sweep_csv(output(out)?, &swept.result).map_err(|e| e.to_string())
}

fn run_separability(source: &Source, gate: &GateFlags, run: &RunFlags, bins: usize, hist: Option<&Path>) -> Result<()> {
    let l = source.load()?;
    let mut server = gate.apply(&l.file)?;
    // only stage-1 scores matter here
    server.force = Some(false);
    let cfg = run.batch(&l.file, server)?;
    let batch = run_batch(&l.samples, l.backend.as_ref(), &cfg).map_err(|e| e.to_string())?;
    report_failures(batch.failed().count(), batch.samples.len());
    let r = separability(batch.succeeded(), bins).map_err(|e| e.to_string())?;
    let mut w = output(None)?;
    let io = |e: io::Error| e.to_string();
    writeln!(w, "key,value").map_err(io)?;
    let rows: [(&str, String); 9] = [
        ("metric", cfg.server.metric.to_string()),
        ("bins", r.bin_count.to_string()),
        ("range_lo", fmt_f64(r.range.0)),
        ("range_hi", fmt_f64(r.range.1)),
        ("bin_width", fmt_f64(r.bin_width)),
        ("correct_count", r.correct_count.to_string()),
        ("incorrect_count", r.incorrect_count.to_string()),
        ("overlap", fmt_f64(r.overlap)),
        ("bhattacharyya", fmt_f64(r.bhattacharyya)),
    ];
    for (k, v) in rows {
        writeln!(w, "{k},{v}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    if let Some(p) = hist {
        let mut h = output(Some(p))?;
        let io = |e: io::Error| format!("{}: {e}", p.display());
        writeln!(h, "bin,lower_edge,correct,incorrect").map_err(io)?;
        for (i, (c, q)) in r.correct_hist.iter().zip(&r.incorrect_hist).enumerate() {
            let lo = r.range.0 + i as f64 * r.bin_width;
            writeln!(h, "{i},{},{},{}", fmt_f64(lo), fmt_f64(*c), fmt_f64(*q)).map_err(io)?;
        }
        h.flush().map_err(io)?;
    }
    Ok(())
}

fn serve(source: &Source, gate: &GateFlags, bind: &str, max_sessions: Option<usize>) -> Result<()> {
    let l = source.load()?;
    let cfg = Arc::new(gate.apply(&l.file)?);
    let listener = TcpListener::bind(bind).map_err(|e| format!("bind {bind}: {e}"))?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    eprintln!("listening on {addr}");
    let out = Arc::new(Mutex::new(io::stdout()));
    writeln!(out.lock().unwrap(), "session_id,sample_id,state,score,retransmit,answer").map_err(|e| e.to_string())?;
    let mut workers = Vec::new();
    let incoming = listener.incoming().take(max_sessions.unwrap_or(usize::MAX));
    for stream in incoming {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                eprintln!("accept failed: {e}");
                continue;
            }
        };
        let (backend, cfg, out) = (l.backend.clone(), cfg.clone(), out.clone());
        workers.push(thread::spawn(move || {
            let Ok(t) = TcpTransport::new(stream) else { return };
            let r = handle_session(t, backend.as_ref(), &cfg);
            let line = format!(
                "{},{},{:?},{},{},{:?}",
                r.session_id,
                r.sample_id.as_deref().unwrap_or_default(),
                r.state,
                r.decision.map(|d| fmt_f64(d.score)).unwrap_or_default(),
                r.retransmitted(),
                r.delivered_answer().unwrap_or_default(),
            );
            let mut o = out.lock().unwrap();
            let _ = writeln!(o, "{line}");
            let _ = o.flush();
        }));
        workers.retain(|w| !w.is_finished());
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}

fn edge(source: &Source, connect: &str, codec: Option<Codec>, out: Option<&Path>) -> Result<()> {
    let l = source.load()?;
    let mut w = csv_writer(output(out)?);
    w.write_record([
        "session_id",
        "sample_id",
        "answer",
        "provisional_answer",
        "score",
        "b1",
        "b2",
        "retransmitted",
        "global_bytes_up",
        "question_bytes_up",
        "bbox_bytes_down",
        "local_bytes_up",
        "answer_bytes_down",
        "error",
    ])
    .map_err(|e| e.to_string())?;
    let mut failed = 0;
    for s in &l.samples {
        let cfg = EdgeConfig {
            codec: match codec {
                Some(c) => c,
                None => l.file.codec()?,
            },
            geometry: s.geometry,
            timeout: l.file.edge_timeout()?,
            ..EdgeConfig::default()
        };
        let original = synthetic_image(&s.sample_id, s.original_width, s.original_height);
        let outcome = match TcpTransport::connect(connect) {
            Ok(t) => run_session(t, s.session_id, &s.sample_id, &original, &s.question, &cfg),
            Err(e) => return Err(format!("connect {connect}: {e}")),
        };
        failed += usize::from(outcome.error.is_some());
        let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
        let g = &outcome.ledger;
        w.write_record([
            s.session_id.to_string(),
            s.sample_id.clone(),
            outcome.answer.clone().unwrap_or_default(),
            outcome.provisional_answer.clone().unwrap_or_default(),
            outcome.uncertainty_score.map(fmt_f64).unwrap_or_default(),
            opt(outcome.bbox.map(|b| b.b1)),
            opt(outcome.bbox.map(|b| b.b2)),
            g.retransmitted.to_string(),
            g.global_bytes_up.to_string(),
            g.question_bytes_up.to_string(),
            g.bbox_bytes_down.to_string(),
            g.local_bytes_up.to_string(),
            g.answer_bytes_down.to_string(),
            outcome.error.map(|e| e.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())?;
    if failed > 0 {
        return Err(format!("{failed} of {} sessions failed", l.samples.len()));
    }
    Ok(())
}

fn csv_writer(out: Box<dyn Write>) -> csv::Writer<Box<dyn Write>> {
    csv::Writer::from_writer(out)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenTraces { source, out, jsonl } => gen_traces(source, out, jsonl.as_deref()),
        Command::Simulate {
            source,
            gate,
            run,
            out,
            records,
        } => simulate(source, gate, run, out.as_deref(), records.as_deref()),
        Command::Sweep {
            source,
            gate,
            run,
            thresholds,
            out,
            baseline,
        } => run_sweep(source, gate, run, thresholds, out.as_deref(), baseline.as_deref()),
        Command::Separability {
            source,
            gate,
            run,
            bins,
            hist,
        } => run_separability(source, gate, run, *bins, hist.as_deref()),
        Command::Serve {
            source,
            gate,
            bind,
            max_sessions,
        } => serve(source, gate, bind, *max_sessions),
        Command::Edge {
            source,
            connect,
            codec,
            out,
        } => edge(source, connect, *codec, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("roigate: error: {e}");
            ExitCode::FAILURE
        }
    }
}
