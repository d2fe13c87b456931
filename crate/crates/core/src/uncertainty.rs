//! Token-level uncertainty metrics, sequence aggregation and the retransmission gate.
//!
//! Every metric consumes a [`TokenDistribution`]: the top-K entries of the decoder's
//! next-token distribution plus the probability mass that fell outside them. Min-entropy
//! and the probability margin are exact under this truncation. Shannon entropy folds the
//! residual into a single atom, which lower-bounds the entropy of the full distribution.
//!
//! All entropies are in bits.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("distribution has no entries")]
    EmptyDistribution,
    #[error("score sequence is empty")]
    EmptySequence,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// One `(token, probability)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: u32,
    pub prob: f64,
}

/// Top-K next-token probabilities plus the residual mass outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    entries: Vec<TokenProb>,
    residual: f64,
    vocab_size: u32,
}

impl TokenDistribution {
    /// Validates and builds a distribution. Entries must already be sorted by
    /// probability, descending.
    pub fn new(
        entries: Vec<TokenProb>,
        residual: f64,
        vocab_size: u32,
    ) -> Result<Self, UncertaintyError> {
        let bad = |m: String| Err(UncertaintyError::InvalidDistribution(m));
        if vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&residual) {
            return bad(format!("residual mass {residual} outside [0, 1]"));
        }
        if entries.len() > vocab_size as usize {
            return bad(format!(
                "{} entries exceed vocabulary of {vocab_size}",
                entries.len()
            ));
        }
        let mut total = residual;
        for (i, e) in entries.iter().enumerate() {
            if !(0.0..=1.0).contains(&e.prob) {
                return bad(format!("entry {i} probability {} outside [0, 1]", e.prob));
            }
            if e.token >= vocab_size {
                return bad(format!("entry {i} token {} >= vocab_size", e.token));
            }
            if i > 0 && e.prob > entries[i - 1].prob {
                return bad(format!("entry {i} breaks descending order"));
            }
            total += e.prob;
        }
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return bad(format!("total mass {total} is not 1"));
        }
        let mut ids: Vec<u32> = entries.iter().map(|e| e.token).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate token id".into());
        }
        Ok(Self {
            entries,
            residual,
            vocab_size,
        })
    }

    /// Builds a distribution from unsorted `(token, prob)` pairs.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (u32, f64)>,
        residual: f64,
        vocab_size: u32,
    ) -> Result<Self, UncertaintyError> {
        let mut entries: Vec<TokenProb> = pairs
            .into_iter()
            .map(|(token, prob)| TokenProb { token, prob })
            .collect();
        entries.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.token.cmp(&b.token)));
        Self::new(entries, residual, vocab_size)
    }

    pub fn entries(&self) -> &[TokenProb] {
        &self.entries
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// Most likely token, if any entries exist.
    pub fn top(&self) -> Option<TokenProb> {
        self.entries.first().copied()
    }
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.log2()
    } else {
        0.0
    }
}

/// Shannon entropy in bits, treating the residual mass as one extra atom.
pub fn shannon_entropy(dist: &TokenDistribution) -> f64 {
    let h: f64 = dist.entries.iter().map(|e| plogp(e.prob)).sum::<f64>() + plogp(dist.residual);
    h.max(0.0)
}

/// `-log2` of the most likely token's probability.
pub fn min_entropy(dist: &TokenDistribution) -> Result<f64, UncertaintyError> {
    let top = dist.top().ok_or(UncertaintyError::EmptyDistribution)?;
    // -log2(1.0) is -0.0; normalise the sign.
    Ok((-top.prob.log2()).max(0.0))
}

/// Gap between the two most likely tokens. With a single explicit entry the runner-up
/// probability is taken as `min(residual, top)`.
pub fn prob_margin(dist: &TokenDistribution) -> Result<f64, UncertaintyError> {
    let top = dist.top().ok_or(UncertaintyError::EmptyDistribution)?;
    let second = match dist.entries.get(1) {
        Some(e) => e.prob,
        None => dist.residual.min(top.prob),
    };
    Ok((top.prob - second).clamp(0.0, 1.0))
}

/// Which direction of the aggregated score triggers retransmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateDirection {
    TriggerWhenAtLeast,
    TriggerWhenAtMost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    Shannon,
    MinEntropy,
    ProbMargin,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [Self::Shannon, Self::MinEntropy, Self::ProbMargin];

    pub fn direction(self) -> GateDirection {
        match self {
            Self::Shannon | Self::MinEntropy => GateDirection::TriggerWhenAtLeast,
            Self::ProbMargin => GateDirection::TriggerWhenAtMost,
        }
    }

    pub fn score(self, dist: &TokenDistribution) -> Result<f64, UncertaintyError> {
        match self {
            Self::Shannon => Ok(shannon_entropy(dist)),
            Self::MinEntropy => min_entropy(dist),
            Self::ProbMargin => prob_margin(dist),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Shannon => "shannon",
            Self::MinEntropy => "min-entropy",
            Self::ProbMargin => "margin",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "shannon" | "entropy" => Ok(Self::Shannon),
            "min-entropy" | "min_entropy" | "minentropy" => Ok(Self::MinEntropy),
            "margin" | "prob-margin" | "prob_margin" => Ok(Self::ProbMargin),
            other => Err(format!("unknown metric '{other}'")),
        }
    }
}

/// How per-step scores collapse into one sequence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationPolicy {
    FullAverage,
    FirstK(usize),
    StartingTokenOnly,
}

impl AggregationPolicy {
    /// Number of leading steps averaged for a sequence of `len` steps.
    pub fn window(self, len: usize) -> usize {
        match self {
            Self::FullAverage => len,
            Self::FirstK(k) => k.max(1).min(len),
            Self::StartingTokenOnly => len.min(1),
        }
    }
}

impl fmt::Display for AggregationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FullAverage => f.write_str("full"),
            Self::FirstK(k) => write!(f, "first-{k}"),
            Self::StartingTokenOnly => f.write_str("start"),
        }
    }
}

impl FromStr for AggregationPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "full" | "full-average" | "average" => Ok(Self::FullAverage),
            "start" | "starting-token" | "first" => Ok(Self::StartingTokenOnly),
            _ => {
                let k = s
                    .strip_prefix("first-")
                    .or_else(|| s.strip_prefix("first"))
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(|| format!("unknown aggregation policy '{s}'"))?;
                Ok(Self::FirstK(k))
            }
        }
    }
}

/// Mean of the leading scores selected by `policy`.
pub fn aggregate(step_scores: &[f64], policy: AggregationPolicy) -> Result<f64, UncertaintyError> {
    if step_scores.is_empty() {
        return Err(UncertaintyError::EmptySequence);
    }
    let n = policy.window(step_scores.len());
    let sum: f64 = step_scores[..n].iter().sum();
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub score: f64,
    pub threshold: f64,
    pub retransmit: bool,
}

/// Compares an aggregated score against the threshold. The boundary triggers
/// retransmission in both directions.
pub fn gate(score: f64, metric: MetricKind, threshold: f64) -> GateDecision {
    let retransmit = match metric.direction() {
        GateDirection::TriggerWhenAtLeast => score >= threshold,
        GateDirection::TriggerWhenAtMost => score <= threshold,
    };
    GateDecision {
        score,
        threshold,
        retransmit,
    }
}
