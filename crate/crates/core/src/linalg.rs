//! Small numeric helpers shared by the prediction and estimation code.

use nalgebra::DMatrix;

/// Index of the largest value; ties go to the lowest index.
///
/// NaN entries never win. Returns 0 for an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || values[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}

/// `ln(sum(exp(x)))` with max subtraction. `-inf` entries contribute zero.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights into probabilities, returning `(probs, log_probs)`.
pub fn normalize_log_weights(log_weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let lse = log_sum_exp(log_weights);
    let log_probs: Vec<f64> = log_weights.iter().map(|&w| w - lse).collect();
    let probs = log_probs.iter().map(|&l| l.exp()).collect();
    (probs, log_probs)
}

/// Replaces `m` by `(m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky
/// factor. `None` if the factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    let mut inv = chol.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    symmetrize(&mut inv);
    Some(inv)
}
