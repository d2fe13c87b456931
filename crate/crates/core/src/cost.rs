//! Prefill FLOPs and communication accounting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CostError {
    #[error("ledger is empty")]
    EmptyLedger,
    #[error("ledger carries no global image bytes")]
    ZeroGlobalBytes,
    #[error("baseline byte count must be positive")]
    ZeroBaseline,
    #[error("invalid LLM shape: {0}")]
    InvalidShape(&'static str),
}

/// Decoder dimensions that enter the prefill FLOPs estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmShape {
    pub d_llm: u64,
    pub num_layers: u64,
    pub base_visual_tokens: u64,
}

impl LlmShape {
    pub fn new(d_llm: u64, num_layers: u64, base_visual_tokens: u64) -> Result<Self, CostError> {
        if d_llm == 0 {
            return Err(CostError::InvalidShape("d_llm must be positive"));
        }
        if num_layers == 0 {
            return Err(CostError::InvalidShape("num_layers must be positive"));
        }
        if base_visual_tokens == 0 {
            return Err(CostError::InvalidShape("base_visual_tokens must be positive"));
        }
        Ok(Self {
            d_llm,
            num_layers,
            base_visual_tokens,
        })
    }

    /// Vicuna-7B decoder behind a 24x24-token encoder.
    pub fn llava_7b() -> Self {
        Self {
            d_llm: 4096,
            num_layers: 32,
            base_visual_tokens: 576,
        }
    }

    pub fn with_visual_tokens(self, n_v: u64) -> Self {
        Self {
            base_visual_tokens: n_v,
            ..self
        }
    }
}

impl Default for LlmShape {
    fn default() -> Self {
        Self::llava_7b()
    }
}

/// `(24 n d^2 + 4 n^2 d) L` in exact integer arithmetic.
pub fn prefill_flops(n_v: u64, shape: &LlmShape) -> u128 {
    let n = u128::from(n_v);
    let d = u128::from(shape.d_llm);
    let l = u128::from(shape.num_layers);
    (24 * n * d * d + 4 * n * n * d) * l
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsReport {
    pub initial: u128,
    pub second_stage: u128,
    pub total: u128,
}

/// FLOPs for one sample. The second stage re-runs the base prefill for the relative
/// attention map and then prefills global and local tokens together.
pub fn stage_flops(retransmitted: bool, shape: &LlmShape) -> FlopsReport {
    let n = shape.base_visual_tokens;
    let initial = prefill_flops(n, shape);
    let second_stage = if retransmitted {
        prefill_flops(n, shape) + prefill_flops(2 * n, shape)
    } else {
        0
    };
    FlopsReport {
        initial,
        second_stage,
        total: initial + second_stage,
    }
}

/// Exact bytes exchanged for one sample. Image counts are encoded `ImagePayload` sizes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub sample_id: String,
    pub global_bytes_up: u64,
    pub question_bytes_up: u64,
    pub bbox_bytes_down: u64,
    pub local_bytes_up: u64,
    pub answer_bytes_down: u64,
    pub retransmitted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    /// Merges another ledger. Entries are kept sorted by sample id so the result does
    /// not depend on merge order.
    pub fn merge(&mut self, other: CommLedger) {
        self.entries.extend(other.entries);
        self.entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_global(&self) -> u64 {
        self.entries.iter().map(|e| e.global_bytes_up).sum()
    }

    pub fn total_local(&self) -> u64 {
        self.entries.iter().map(|e| e.local_bytes_up).sum()
    }

    pub fn retransmissions(&self) -> usize {
        self.entries.iter().filter(|e| e.retransmitted).count()
    }
}

impl FromIterator<LedgerEntry> for CommLedger {
    fn from_iter<T: IntoIterator<Item = LedgerEntry>>(iter: T) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Retransmitted image bytes relative to the all-global baseline.
pub fn additional_comm_cost(ledger: &CommLedger) -> Result<f64, CostError> {
    if ledger.is_empty() {
        return Err(CostError::EmptyLedger);
    }
    let global = ledger.total_global();
    if global == 0 {
        return Err(CostError::ZeroGlobalBytes);
    }
    Ok(ledger.total_local() as f64 / global as f64)
}

/// All image bytes sent, relative to a reference byte count (e.g. every global image at
/// the highest codec quality).
pub fn relative_comm_cost(ledger: &CommLedger, baseline_bytes: u64) -> Result<f64, CostError> {
    if baseline_bytes == 0 {
        return Err(CostError::ZeroBaseline);
    }
    Ok((ledger.total_global() + ledger.total_local()) as f64 / baseline_bytes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: usize, global: u64, local: u64) -> LedgerEntry {
        LedgerEntry {
            sample_id: format!("s{id:03}"),
            global_bytes_up: global,
            local_bytes_up: local,
            retransmitted: local > 0,
            ..Default::default()
        }
    }

    #[test]
    fn flops_small_shapes() {
        let unit = LlmShape::new(1, 1, 1).unwrap();
        assert_eq!(prefill_flops(1, &unit), 28);
        assert_eq!(prefill_flops(2, &unit), 64);
        let r = stage_flops(true, &unit);
        assert_eq!((r.initial, r.second_stage, r.total), (28, 92, 120));
        let r = stage_flops(false, &unit);
        assert_eq!((r.initial, r.second_stage, r.total), (28, 0, 28));
    }

    #[test]
    fn rejects_zero_dimensions() {
        assert!(LlmShape::new(0, 1, 1).is_err());
        assert!(LlmShape::new(1, 0, 1).is_err());
        assert!(LlmShape::new(1, 1, 0).is_err());
    }

    #[test]
    fn comm_cost_examples() {
        let none: CommLedger = (0..4).map(|i| entry(i, 100, 0)).collect();
        assert_eq!(additional_comm_cost(&none).unwrap(), 0.0);
        let all: CommLedger = (0..4).map(|i| entry(i, 100, 100)).collect();
        assert_eq!(additional_comm_cost(&all).unwrap(), 1.0);
        let half: CommLedger = vec![entry(0, 100, 100), entry(1, 100, 0)].into_iter().collect();
        assert_eq!(additional_comm_cost(&half).unwrap(), 0.5);
        assert_eq!(additional_comm_cost(&CommLedger::new()), Err(CostError::EmptyLedger));
    }

    #[test]
    fn relative_cost_examples() {
        let l: CommLedger = (0..10).map(|i| entry(i, 40, 0)).collect();
        assert_eq!(relative_comm_cost(&l, 1000).unwrap(), 0.4);
        assert_eq!(relative_comm_cost(&l, 400).unwrap(), 1.0);
        assert_eq!(relative_comm_cost(&l, 800).unwrap(), 0.5);
        assert_eq!(relative_comm_cost(&l, 0), Err(CostError::ZeroBaseline));
    }

    #[test]
    fn merge_is_order_independent() {
        let a: CommLedger = vec![entry(2, 10, 0), entry(0, 10, 10)].into_iter().collect();
        let b: CommLedger = vec![entry(1, 10, 0)].into_iter().collect();
        let mut ab = a.clone();
        ab.merge(b.clone());
        let mut ba = b;
        ba.merge(a);
        assert_eq!(ab, ba);
    }

    proptest! {
        #[test]
        fn flops_strictly_increasing(n in 1u64..5000, d in 1u64..8192, l in 1u64..100) {
            let s = LlmShape::new(d, l, n).unwrap();
            let base = prefill_flops(n, &s);
            prop_assert!(prefill_flops(n + 1, &s) > base);
            prop_assert!(prefill_flops(n, &LlmShape::new(d + 1, l, n).unwrap()) > base);
            prop_assert!(prefill_flops(n, &LlmShape::new(d, l + 1, n).unwrap()) > base);
        }

        #[test]
        fn doubling_tokens_costs_between_two_and_four_times(n in 1u64..5000, d in 1u64..8192, l in 1u64..100) {
            let s = LlmShape::new(d, l, n).unwrap();
            let one = prefill_flops(n, &s);
            let two = prefill_flops(2 * n, &s);
            prop_assert!(two >= 2 * one && two <= 4 * one);
        }

        #[test]
        fn expected_flops_between_extremes(flags in prop::collection::vec(any::<bool>(), 1..50)) {
            let s = LlmShape::llava_7b();
            let total: u128 = flags.iter().map(|&f| stage_flops(f, &s).total).sum();
            let never = stage_flops(false, &s).total * flags.len() as u128;
            let always = stage_flops(true, &s).total * flags.len() as u128;
            prop_assert!(never <= total && total <= always);
            prop_assert_eq!(total == never, flags.iter().all(|f| !f));
            prop_assert_eq!(total == always, flags.iter().all(|&f| f));
        }

        #[test]
        fn additional_cost_monotone(flags in prop::collection::vec(any::<bool>(), 1..40), extra in 0usize..40) {
            let ledger: CommLedger = flags.iter().enumerate()
                .map(|(i, &f)| entry(i, 100, if f { 80 } else { 0 })).collect();
            let before = additional_comm_cost(&ledger).unwrap();
            let idx = extra % flags.len();
            let bumped: CommLedger = flags.iter().enumerate()
                .map(|(i, &f)| entry(i, 100, if f || i == idx { 80 } else { 0 })).collect();
            prop_assert!(additional_comm_cost(&bumped).unwrap() >= before);
        }
    }
}
