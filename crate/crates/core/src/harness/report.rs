use super::{HarnessError, SampleResult, SweepResult};
use std::io::Write;

/// Seventeen significant digits, enough to round-trip any binary64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub const SWEEP_HEADER: [&str; 6] = [
    "threshold",
    "retransmission_fraction",
    "additional_comm_cost",
    "accuracy",
    "mean_flops",
    "relative_flops",
];

pub fn write_sweep_csv<W: Write>(out: W, result: &SweepResult) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in &result.rows {
        w.write_record(
            [
                r.threshold,
                r.retransmission_fraction,
                r.additional_comm_cost,
                r.accuracy,
                r.mean_flops,
                r.relative_flops,
            ]
            .map(fmt_f64),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub const RECORDS_HEADER: [&str; 20] = [
    "session_id",
    "sample_id",
    "state",
    "score",
    "retransmit",
    "b1",
    "b2",
    "stage1_correct",
    "stage2_correct",
    "delivered_correct",
    "global_bytes_up",
    "question_bytes_up",
    "bbox_bytes_down",
    "local_bytes_up",
    "answer_bytes_down",
    "flops_initial",
    "flops_total",
    "answer",
    "failure_code",
    "failure_detail",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per sample in the given order.
pub fn write_records_csv<'a, W, I>(out: W, results: I) -> Result<(), HarnessError>
where
    W: Write,
    I: IntoIterator<Item = &'a SampleResult>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORDS_HEADER)?;
    for s in results {
        let r = &s.record;
        let l = &s.ledger;
        let failure = r
            .failure
            .as_ref()
            .map(|f| (f.code.to_string(), f.detail.clone()))
            .or_else(|| s.edge_error.clone().map(|e| (String::new(), e)))
            .unwrap_or_default();
        let state = if s.succeeded() { "done" } else { "failed" };
        w.write_record([
            s.session_id.to_string(),
            s.sample_id.clone(),
            state.to_owned(),
            opt(r.decision.map(|d| fmt_f64(d.score))),
            r.retransmitted().to_string(),
            opt(r.bbox.map(|b| b.b1)),
            opt(r.bbox.map(|b| b.b2)),
            opt(r.stage1_correct),
            opt(r.stage2_correct),
            opt(r.delivered_correct()),
            l.global_bytes_up.to_string(),
            l.question_bytes_up.to_string(),
            l.bbox_bytes_down.to_string(),
            l.local_bytes_up.to_string(),
            l.answer_bytes_down.to_string(),
            opt(r.flops.map(|f| f.initial)),
            opt(r.flops.map(|f| f.total)),
            r.delivered_answer().unwrap_or_default().to_owned(),
            failure.0,
            failure.1,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SweepRow;

    #[test]
    fn sweep_csv_layout() {
        let result = SweepResult {
            rows: vec![SweepRow {
                threshold: f64::INFINITY,
                retransmission_fraction: 0.0,
                additional_comm_cost: 0.0,
                accuracy: 0.1,
                mean_flops: 7.5e12,
                relative_flops: 1.0,
            }],
        };
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &result).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER.join(","));
        assert_eq!(
            lines[1],
            "inf,0.0000000000000000e0,0.0000000000000000e0,1.0000000000000001e-1,7.5000000000000000e12,1.0000000000000000e0"
        );
    }

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, 2.5e-300, 12345.678901234567] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
