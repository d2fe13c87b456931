use super::{HarnessError, SampleResult};

pub const DEFAULT_BINS: usize = 64;

/// How well stage-1 scores split correct from incorrect answers.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparabilityReport {
    pub overlap: f64,
    /// `+inf` when the histograms share no bin.
    pub bhattacharyya: f64,
    pub bin_count: usize,
    pub bin_width: f64,
    pub range: (f64, f64),
    pub correct_hist: Vec<f64>,
    pub incorrect_hist: Vec<f64>,
    pub correct_count: usize,
    pub incorrect_count: usize,
}

fn counts(scores: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut c = vec![0u64; bins];
    let span = hi - lo;
    for &x in scores {
        let i = if span > 0.0 {
            (((x - lo) / span) * bins as f64).floor() as usize
        } else {
            0
        };
        c[i.min(bins - 1)] += 1;
    }
    c
}

/// Histograms both classes over their pooled range with `bins` equal-width bins.
/// Overlap and the Bhattacharyya coefficient are evaluated from integer counts so
/// that identical classes come out exact.
pub fn separability_from_scores(
    correct: &[f64],
    incorrect: &[f64],
    bins: usize,
) -> Result<SeparabilityReport, HarnessError> {
    if bins == 0 {
        return Err(HarnessError::ZeroBins);
    }
    if correct.is_empty() || incorrect.is_empty() {
        return Err(HarnessError::SingleClassOnly);
    }
    let pooled = correct.iter().chain(incorrect);
    let lo = pooled.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = pooled.copied().fold(f64::NEG_INFINITY, f64::max);
    let cp = counts(correct, lo, hi, bins);
    let cq = counts(incorrect, lo, hi, bins);
    let (np, nq) = (correct.len() as u64, incorrect.len() as u64);

    let overlap_num: u128 = cp
        .iter()
        .zip(&cq)
        .map(|(&a, &b)| u128::from(a * nq).min(u128::from(b * np)))
        .sum();
    let overlap = overlap_num as f64 / (u128::from(np) * u128::from(nq)) as f64;

    let bc_num: f64 = cp.iter().zip(&cq).map(|(&a, &b)| ((a as f64) * (b as f64)).sqrt()).sum();
    let bc = bc_num / ((np as f64) * (nq as f64)).sqrt();
    let bhattacharyya = if bc <= 0.0 {
        f64::INFINITY
    } else if bc >= 1.0 {
        0.0
    } else {
        -bc.ln()
    };

    let norm = |c: &[u64], n: u64| c.iter().map(|&v| v as f64 / n as f64).collect::<Vec<_>>();
    Ok(SeparabilityReport {
        overlap,
        bhattacharyya,
        bin_count: bins,
        bin_width: (hi - lo) / bins as f64,
        range: (lo, hi),
        correct_hist: norm(&cp, np),
        incorrect_hist: norm(&cq, nq),
        correct_count: correct.len(),
        incorrect_count: incorrect.len(),
    })
}

/// Splits successful samples by their stage-1 label and compares the aggregated
/// stage-1 scores.
pub fn separability<'a, I>(results: I, bins: usize) -> Result<SeparabilityReport, HarnessError>
where
    I: IntoIterator<Item = &'a SampleResult>,
{
    let (mut correct, mut incorrect) = (Vec::new(), Vec::new());
    for r in results {
        let (Some(d), Some(label)) = (r.record.decision, r.record.stage1_correct) else {
            continue;
        };
        if label {
            correct.push(d.score);
        } else {
            incorrect.push(d.score);
        }
    }
    separability_from_scores(&correct, &incorrect, bins)
}
