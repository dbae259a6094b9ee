//! Multi-run aggregation: mean, spread, expected tail accuracy, win rates.

use serde::{Deserialize, Serialize};

use crate::error::{OgaError, Result};
use crate::stream::RunTrace;

/// Share of worst runs averaged by the expected tail accuracy.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.1;

/// Number of runs in the tail: `max(1, floor(fraction * n))`.
pub fn tail_size(n: usize, fraction: f64) -> usize {
    // nudge so that e.g. 0.1 * 30 = 3.0000000000000004 and 0.7 * 10 =
    // 6.999999999999999 both land on the intended integer
    let raw = (fraction * n as f64 + 1e-9).floor() as usize;
    raw.clamp(1, n.max(1))
}

/// Mean taken relative to the first value, so identical inputs come out exact.
fn shifted_mean(v: &[f64]) -> f64 {
    let a0 = v[0];
    a0 + v.iter().map(|x| x - a0).sum::<f64>() / v.len() as f64
}

/// Mean of the `tail_size(n, fraction)` lowest accuracies.
pub fn expected_tail_accuracy(accuracies: &[f64], fraction: f64) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(OgaError::Validation("no accuracies to aggregate".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(OgaError::Validation(format!(
            "tail fraction must be in (0, 1], got {fraction}"
        )));
    }
    let m = tail_size(accuracies.len(), fraction);
    if m == accuracies.len() {
        return Ok(shifted_mean(accuracies));
    }
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(shifted_mean(&sorted[..m]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_accuracy: f64,
    /// False when there was only one run to estimate the spread from.
    pub std_defined: bool,
    pub eta: f64,
    pub n_runs: usize,
    pub tail_size: usize,
    /// Per-run accuracies in seed order.
    pub per_run: Vec<f64>,
}

pub fn summarize_accuracies(per_run: &[f64]) -> Result<MetricsReport> {
    if per_run.is_empty() {
        return Err(OgaError::Validation("no runs to summarize".into()));
    }
    let n = per_run.len();
    let mean = shifted_mean(per_run);
    let (std, defined) = if n > 1 {
        let var = per_run.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var.sqrt(), true)
    } else {
        (0.0, false)
    };
    let eta = expected_tail_accuracy(per_run, DEFAULT_TAIL_FRACTION)?;
    Ok(MetricsReport {
        mean_accuracy: mean,
        std_accuracy: std,
        std_defined: defined,
        // rounding can push the tail mean an ulp above the full mean
        eta: eta.min(mean),
        n_runs: n,
        tail_size: tail_size(n, DEFAULT_TAIL_FRACTION),
        per_run: per_run.to_vec(),
    })
}

pub fn summarize(traces: &[RunTrace]) -> Result<MetricsReport> {
    let per_run: Vec<f64> = traces.iter().map(|t| t.final_accuracy).collect();
    summarize_accuracies(&per_run)
}

/// Fraction of aligned runs where `a` is strictly better than `b`.
pub fn win_rate(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(OgaError::Validation(format!(
            "win rate needs aligned runs, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(OgaError::Validation("no runs to compare".into()));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    Ok(wins as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eta_examples() {
        assert_eq!(expected_tail_accuracy(&[0.7; 13], 0.1).unwrap(), 0.7);
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(expected_tail_accuracy(&hundred, 0.1).unwrap(), 5.5);
        assert_eq!(expected_tail_accuracy(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.1).unwrap(), 1.0);
        assert!(expected_tail_accuracy(&[], 0.1).is_err());
        assert!(expected_tail_accuracy(&[1.0], 0.0).is_err());
    }

    #[test]
    fn tail_sizes() {
        assert_eq!(tail_size(100, 0.1), 10);
        assert_eq!(tail_size(5, 0.1), 1);
        assert_eq!(tail_size(30, 0.1), 3);
        assert_eq!(tail_size(10, 0.7), 7);
        assert_eq!(tail_size(7, 1.0), 7);
    }

    #[test]
    fn summarize_examples() {
        let one = summarize_accuracies(&[0.42]).unwrap();
        assert_eq!(one.mean_accuracy, 0.42);
        assert_eq!(one.eta, 0.42);
        assert_eq!(one.std_accuracy, 0.0);
        assert!(!one.std_defined);

        let two = summarize_accuracies(&[0.6, 0.8]).unwrap();
        assert!((two.mean_accuracy - 0.7).abs() < 1e-15);
        assert!((two.std_accuracy - 0.1414213562373095).abs() < 1e-12);
        assert_eq!(two.eta, 0.6);

        let same = summarize_accuracies(&[0.55; 100]).unwrap();
        assert_eq!(same.std_accuracy, 0.0);
        assert_eq!(same.eta, same.mean_accuracy);
        assert_eq!(same.tail_size, 10);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn win_rate_examples() {
        let a = [0.3, 0.5, 0.9];
        assert_eq!(win_rate(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 1e-9).collect();
        assert_eq!(win_rate(&b, &a).unwrap(), 1.0);
        assert!((win_rate(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(win_rate(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn eta_properties(v in proptest::collection::vec(0.0f64..1.0, 1..200), f1 in 0.01f64..1.0, f2 in 0.01f64..1.0) {
            let mean = summarize_accuracies(&v).unwrap().mean_accuracy;
            let eta = expected_tail_accuracy(&v, 0.1).unwrap();
            prop_assert!(eta <= mean + 1e-12);
            prop_assert!((expected_tail_accuracy(&v, 1.0).unwrap() - mean).abs() <= 1e-12);
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            prop_assert!(expected_tail_accuracy(&v, lo).unwrap() <= expected_tail_accuracy(&v, hi).unwrap() + 1e-12);
            let mut rev = v.clone();
            rev.reverse();
            prop_assert_eq!(expected_tail_accuracy(&rev, 0.1).unwrap(), eta);
        }

        #[test]
        fn win_rates_are_complementary(pairs in proptest::collection::vec((0u8..5, 0u8..5), 1..50)) {
            let a: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
            let b: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
            let total = win_rate(&a, &b).unwrap() + win_rate(&b, &a).unwrap();
            let ties = pairs.iter().any(|p| p.0 == p.1);
            prop_assert!(total <= 1.0 + 1e-12);
            prop_assert_eq!((total - 1.0).abs() < 1e-12, !ties);
        }
    }
}
