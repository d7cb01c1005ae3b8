//! Evaluation metrics: accuracy, calibration error, and ranking AUROC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of calibration bins.
pub const DEFAULT_ECE_BINS: usize = 15;

/// Evaluation summary for one model/dataset pair, serialized as JSON by
/// the command-line tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub ece: f64,
    pub num_bins: usize,
    /// Separation of out-of-domain from in-domain uncertainty scores;
    /// absent when no OOD evaluation ran.
    pub auroc: Option<f64>,
    pub n_eval: usize,
}

/// Fraction of exact label matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("accuracy needs at least one sample"));
    }
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "accuracy".into(),
            expected: format!("{} labels", pred.len()),
            got: format!("{}", truth.len()),
        });
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Bin index of a confidence value under K right-closed bins of (0, 1]:
/// bin k (0-indexed) is ((k)/K, (k+1)/K], except confidence 0 joins bin 0.
/// The initial guess comes from arithmetic; the comparisons against the
/// actual f64 bin edges make the assignment exact.
fn bin_of(c: f64, k: usize) -> usize {
    let mut idx = if c <= 0.0 {
        0
    } else {
        ((c * k as f64).ceil() as usize).saturating_sub(1).min(k - 1)
    };
    let upper = |i: usize| {
        if i + 1 == k {
            1.0
        } else {
            (i + 1) as f64 / k as f64
        }
    };
    while idx + 1 < k && c > upper(idx) {
        idx += 1;
    }
    while idx > 0 && c <= upper(idx - 1) {
        idx -= 1;
    }
    idx
}

/// Expected calibration error over K equal-width right-closed bins:
/// sum_k (|B_k|/B) |acc(B_k) - conf(B_k)|, empty bins contributing zero.
pub fn ece(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<f64> {
    if num_bins == 0 {
        return Err(Error::InvalidConfig("ece needs at least one bin".into()));
    }
    if confidences.is_empty() {
        return Err(Error::EmptyInput("ece needs at least one sample"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch {
            context: "ece".into(),
            expected: format!("{} flags", confidences.len()),
            got: format!("{}", correct.len()),
        });
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut hit_sum = vec![0usize; num_bins];
    for (i, (&c, &ok)) in confidences.iter().zip(correct).enumerate() {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::ConfidenceOutOfRange { index: i, value: c });
        }
        let b = bin_of(c, num_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hit_sum[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    for b in 0..num_bins {
        if count[b] == 0 {
            continue;
        }
        let acc = hit_sum[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += (count[b] as f64 / n) * (acc - conf).abs();
    }
    Ok(total)
}

/// Probability that a random positive outscores a random negative, ties
/// counted half: the Mann-Whitney U statistic over n_pos * n_neg pairs.
/// Pair outcomes accumulate in integer half-units, so the result is the
/// exact rational U/(n_pos*n_neg) rounded once.
pub fn auroc(scores_positive: &[f64], scores_negative: &[f64]) -> Result<f64> {
    if scores_positive.is_empty() || scores_negative.is_empty() {
        return Err(Error::EmptyInput("auroc needs both score lists nonempty"));
    }
    let mut half_units: u64 = 0;
    for &p in scores_positive {
        for &q in scores_negative {
            if p > q {
                half_units += 2;
            } else if p == q {
                half_units += 1;
            }
        }
    }
    let pairs = (scores_positive.len() * scores_negative.len()) as f64;
    Ok(half_units as f64 / (2.0 * pairs))
}
