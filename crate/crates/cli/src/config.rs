//! TOML run configuration. Every table and key is optional; command-line flags
//! override whatever the file sets.

use roigate_core::backend::SynthParams;
use roigate_core::cost::LlmShape;
use roigate_core::harness::TransportMode;
use roigate_core::image::Codec;
use roigate_core::server::{ServerConfig, DEFAULT_WINDOW_SCALES};
use roigate_core::{AggregationPolicy, MetricKind};
use serde::Deserialize;
use std::path::Path;
use std::time::Duration;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub server: ServerSection,
    pub edge: EdgeSection,
    pub batch: BatchSection,
    pub synthetic: SynthParams,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub metric: String,
    pub threshold: f64,
    pub aggregation: String,
    pub attention_layer: Option<usize>,
    pub window_scales: Vec<f64>,
    pub epsilon: f64,
    pub send_nonfinal_answer: bool,
    /// Seconds to wait for a local image; 0 waits forever.
    pub session_timeout: f64,
    pub d_llm: u64,
    pub num_layers: u64,
}

impl Default for ServerSection {
    fn default() -> Self {
        let d = ServerConfig::default();
        Self {
            metric: d.metric.to_string(),
            threshold: d.threshold,
            aggregation: d.aggregation.to_string(),
            attention_layer: d.attention_layer,
            window_scales: DEFAULT_WINDOW_SCALES.to_vec(),
            epsilon: d.epsilon,
            send_nonfinal_answer: d.send_nonfinal_answer,
            session_timeout: 30.0,
            d_llm: d.llm_shape.d_llm,
            num_layers: d.llm_shape.num_layers,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeSection {
    pub codec: String,
    /// Seconds to wait for each server frame; 0 waits forever.
    pub timeout: f64,
}

impl Default for EdgeSection {
    fn default() -> Self {
        Self {
            codec: "raw".into(),
            timeout: 30.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub transport: String,
    /// 0 uses every available core.
    pub workers: usize,
}

impl Default for BatchSection {
    fn default() -> Self {
        Self {
            transport: "inproc".into(),
            workers: 0,
        }
    }
}

fn seconds(s: f64) -> Result<Option<Duration>, String> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(format!("timeout must be a finite number of seconds >= 0, got {s}"));
    }
    Ok((s > 0.0).then(|| Duration::from_secs_f64(s)))
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn server(&self) -> Result<ServerConfig, String> {
        let s = &self.server;
        let llm_shape = LlmShape::new(s.d_llm, s.num_layers, LlmShape::llava_7b().base_visual_tokens)
            .map_err(|e| e.to_string())?;
        let cfg = ServerConfig {
            metric: s.metric.parse::<MetricKind>()?,
            threshold: s.threshold,
            aggregation: s.aggregation.parse::<AggregationPolicy>()?,
            attention_layer: s.attention_layer,
            window_scales: s.window_scales.clone(),
            llm_shape,
            epsilon: s.epsilon,
            send_nonfinal_answer: s.send_nonfinal_answer,
            session_timeout: seconds(s.session_timeout)?,
            force: None,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn codec(&self) -> Result<Codec, String> {
        self.edge.codec.parse()
    }

    pub fn edge_timeout(&self) -> Result<Option<Duration>, String> {
        seconds(self.edge.timeout)
    }

    pub fn transport(&self) -> Result<TransportMode, String> {
        self.batch.transport.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: FileConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.server().unwrap(), ServerConfig::default());
        assert_eq!(cfg.codec().unwrap(), Codec::Raw);
        assert_eq!(cfg.synthetic, SynthParams::default());
    }

    #[test]
    fn sections_parse() {
        let cfg: FileConfig = toml::from_str(
            r#"
            [server]
            metric = "shannon"
            threshold = 1.25
            aggregation = "first-5"
            session_timeout = 0
            [edge]
            codec = "dct:60"
            [batch]
            transport = "tcp"
            workers = 2
            [synthetic]
            seed = 9
            num_samples = 12
            "#,
        )
        .unwrap();
        let s = cfg.server().unwrap();
        assert_eq!(s.metric, MetricKind::Shannon);
        assert_eq!(s.aggregation, AggregationPolicy::FirstK(5));
        assert_eq!(s.session_timeout, None);
        assert_eq!(cfg.codec().unwrap(), Codec::Dct { quality: 60 });
        assert_eq!(cfg.transport().unwrap(), TransportMode::TcpLoopback);
        assert_eq!((cfg.synthetic.seed, cfg.synthetic.num_samples), (9, 12));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("[server]\nthresh = 1").is_err());
    }
}
