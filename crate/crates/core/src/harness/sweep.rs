use super::{run_batch, BatchConfig, BatchResult, EdgeSample, HarnessError, SampleResult};
use crate::backend::Backend;
use crate::cost::{additional_comm_cost, CommLedger};
use crate::uncertainty::gate;
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub retransmission_fraction: f64,
    pub additional_comm_cost: f64,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub relative_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Tradeoff row for one set of per-sample outcomes; failed samples are skipped.
pub fn summarize<'a, I>(threshold: f64, results: I) -> Result<SweepRow, HarnessError>
where
    I: IntoIterator<Item = &'a SampleResult>,
{
    let mut n = 0usize;
    let mut retransmitted = 0usize;
    let mut correct = 0usize;
    let mut total_flops = 0u128;
    let mut initial_flops = 0u128;
    let mut ledger = CommLedger::new();
    for r in results.into_iter().filter(|r| r.succeeded()) {
        n += 1;
        retransmitted += usize::from(r.record.retransmitted());
        correct += usize::from(r.record.delivered_correct() == Some(true));
        let f = r.record.flops.unwrap_or_default();
        total_flops += f.total;
        initial_flops += f.initial;
        ledger.push(r.ledger.clone());
    }
    if n == 0 {
        return Err(HarnessError::NoSuccessfulSamples);
    }
    let additional = if ledger.total_global() == 0 {
        0.0
    } else {
        additional_comm_cost(&ledger).expect("non-empty ledger with global bytes")
    };
    Ok(SweepRow {
        threshold,
        retransmission_fraction: retransmitted as f64 / n as f64,
        additional_comm_cost: additional,
        accuracy: correct as f64 / n as f64,
        mean_flops: total_flops as f64 / n as f64,
        relative_flops: total_flops as f64 / initial_flops as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub result: SweepResult,
    /// Every sample, never retransmitted.
    pub initial: BatchResult,
    /// Forced retransmission for the samples any threshold triggers, in input order.
    pub refined: BatchResult,
    /// Per threshold, the session ids that were retransmitted.
    pub triggered: Vec<BTreeSet<u64>>,
}

fn valid_thresholds(t: &[f64]) -> bool {
    t.iter().all(|x| !x.is_nan() && *x >= 0.0) && t.windows(2).all(|w| w[0] <= w[1])
}

/// Evaluates every threshold. Stage 1 runs once per sample; stage 2 runs once per
/// sample that at least one threshold triggers. Rows equal those obtained by running
/// a separate batch per threshold.
pub fn sweep(
    samples: &[EdgeSample],
    backend: &dyn Backend,
    config: &BatchConfig,
    thresholds: &[f64],
) -> Result<SweepOutput, HarnessError> {
    if !valid_thresholds(thresholds) {
        return Err(HarnessError::Thresholds);
    }
    let mut pass = config.clone();
    pass.server.force = Some(false);
    let initial = run_batch(samples, backend, &pass)?;

    let metric = config.server.metric;
    let triggers = |r: &SampleResult, t: f64| {
        r.succeeded() && r.record.decision.is_some_and(|d| gate(d.score, metric, t).retransmit)
    };
    let triggered: Vec<BTreeSet<u64>> = thresholds
        .iter()
        .map(|&t| {
            initial
                .samples
                .iter()
                .filter(|r| triggers(r, t))
                .map(|r| r.session_id)
                .collect()
        })
        .collect();
    let union: BTreeSet<u64> = triggered.iter().flatten().copied().collect();
    let subset: Vec<EdgeSample> = samples
        .iter()
        .filter(|s| union.contains(&s.session_id))
        .cloned()
        .collect();
    pass.server.force = Some(true);
    let refined = run_batch(&subset, backend, &pass)?;

    let rows = thresholds
        .iter()
        .zip(&triggered)
        .map(|(&t, set)| {
            let mut j = 0;
            let chosen = initial.samples.iter().map(|r| {
                if set.contains(&r.session_id) {
                    while refined.samples[j].session_id != r.session_id {
                        j += 1;
                    }
                    &refined.samples[j]
                } else {
                    r
                }
            });
            summarize(t, chosen)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepOutput {
        result: SweepResult { rows },
        initial,
        refined,
        triggered,
    })
}

/// Retransmitting a uniformly random fraction `c` of samples. In expectation the
/// accuracy interpolates linearly between the two endpoint accuracies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomBaseline {
    pub initial_accuracy: f64,
    pub full_accuracy: f64,
}

impl RandomBaseline {
    /// Reads the endpoints off a sweep containing the thresholds `+inf` and `0`.
    pub fn from_sweep(result: &SweepResult) -> Option<Self> {
        let at = |pred: fn(f64) -> bool| result.rows.iter().find(|r| pred(r.threshold)).map(|r| r.accuracy);
        Some(Self {
            initial_accuracy: at(|t| t == f64::INFINITY)?,
            full_accuracy: at(|t| t == 0.0)?,
        })
    }

    pub fn accuracy_at(&self, cost: f64) -> f64 {
        self.initial_accuracy + cost.clamp(0.0, 1.0) * (self.full_accuracy - self.initial_accuracy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SynthParams, SyntheticBackend};
    use crate::harness::samples_from_synthetic;
    use crate::server::ServerConfig;

    fn setup() -> (SyntheticBackend, Vec<EdgeSample>) {
        let params = SynthParams {
            num_samples: 40,
            ..SynthParams::small()
        };
        let samples = samples_from_synthetic(&params).unwrap();
        (SyntheticBackend::new(params).unwrap(), samples)
    }

    #[test]
    fn sweep_matches_naive_reruns() {
        let (backend, samples) = setup();
        let cfg = BatchConfig::default();
        let thresholds = [0.0, 0.3, 0.8, 1.5, f64::INFINITY];
        let out = sweep(&samples, &backend, &cfg, &thresholds).unwrap();
        for (row, &t) in out.result.rows.iter().zip(&thresholds) {
            let naive_cfg = BatchConfig {
                server: ServerConfig {
                    threshold: t,
                    ..cfg.server.clone()
                },
                ..cfg.clone()
            };
            let naive = run_batch(&samples, &backend, &naive_cfg).unwrap();
            let expect = summarize(t, &naive.samples).unwrap();
            assert_eq!(row.retransmission_fraction.to_bits(), expect.retransmission_fraction.to_bits());
            assert_eq!(row.additional_comm_cost.to_bits(), expect.additional_comm_cost.to_bits());
            assert_eq!(row.accuracy.to_bits(), expect.accuracy.to_bits());
            assert_eq!(row.mean_flops.to_bits(), expect.mean_flops.to_bits());
            assert_eq!(row.relative_flops.to_bits(), expect.relative_flops.to_bits());
        }
        assert_eq!(out.result.rows[0].additional_comm_cost, 1.0);
        assert_eq!(out.result.rows[4].additional_comm_cost, 0.0);
        assert_eq!(out.result.rows[4].relative_flops, 1.0);
    }

    #[test]
    fn thresholds_must_be_sorted() {
        let (backend, samples) = setup();
        let cfg = BatchConfig::default();
        assert!(matches!(
            sweep(&samples, &backend, &cfg, &[1.0, 0.5]),
            Err(HarnessError::Thresholds)
        ));
        assert!(matches!(
            sweep(&samples, &backend, &cfg, &[-1.0]),
            Err(HarnessError::Thresholds)
        ));
    }

    #[test]
    fn baseline_interpolates() {
        let b = RandomBaseline {
            initial_accuracy: 0.5,
            full_accuracy: 0.7,
        };
        assert_eq!(b.accuracy_at(0.0), 0.5);
        assert!((b.accuracy_at(0.5) - 0.6).abs() < 1e-15);
        assert_eq!(b.accuracy_at(1.0), 0.7);
    }
}
