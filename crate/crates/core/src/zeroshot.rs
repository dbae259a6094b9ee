//! Zero-shot classification from cosine logits.

use nalgebra::DMatrix;

use crate::embedding::TextClassifier;
use crate::error::{OgaError, Result};
use crate::linalg::{argmax, normalize_log_weights};

/// Zero-shot outputs for a batch, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotOutput {
    /// Cosine similarities, B x K.
    pub logits: DMatrix<f64>,
    /// Temperature-softmax soft labels, B x K.
    pub probs: DMatrix<f64>,
    /// Shannon entropy of each `probs` row, in nats.
    pub entropy: Vec<f64>,
    pub pseudo_label: Vec<usize>,
}

impl ZeroShotOutput {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            logits: DMatrix::zeros(0, num_classes),
            probs: DMatrix::zeros(0, num_classes),
            entropy: Vec::new(),
            pseudo_label: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entropy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropy.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob_row(&self, i: usize) -> Vec<f64> {
        self.probs.row(i).iter().copied().collect()
    }

    pub fn logit_row(&self, i: usize) -> Vec<f64> {
        self.logits.row(i).iter().copied().collect()
    }

    /// Rows `indices` of this output, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            logits: self.logits.select_rows(indices),
            probs: self.probs.select_rows(indices),
            entropy: indices.iter().map(|&i| self.entropy[i]).collect(),
            pseudo_label: indices.iter().map(|&i| self.pseudo_label[i]).collect(),
        }
    }
}

/// Inner products of every batch row with every class embedding, B x K.
pub fn compute_logits(batch: &DMatrix<f64>, classifier: &TextClassifier) -> Result<DMatrix<f64>> {
    compute_logits_with(batch, &classifier.matrix())
}

fn compute_logits_with(batch: &DMatrix<f64>, class_matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if batch.ncols() != class_matrix.ncols() {
        return Err(OgaError::Validation(format!(
            "batch dimension {} does not match classifier dimension {}",
            batch.ncols(),
            class_matrix.ncols()
        )));
    }
    Ok(batch * class_matrix.transpose())
}

fn log_softmax(logits: &[f64], temperature: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(OgaError::Validation(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(OgaError::Numerics(format!("non-finite logit {bad}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(OgaError::Numerics("logit / temperature overflows".into()));
    }
    Ok(normalize_log_weights(&scaled))
}

/// `softmax(logits / temperature)`, evaluated in the log domain.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    log_softmax(logits, temperature).map(|(p, _)| p)
}

/// `-sum(p ln p)` with `0 ln 0 = 0`, clamped to `[0, ln K]`.
pub fn shannon_entropy(probs: &[f64]) -> Result<f64> {
    if let Some(bad) = probs.iter().find(|&&p| p < 0.0 || p.is_nan()) {
        return Err(OgaError::Validation(format!("negative probability {bad}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(OgaError::Validation(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    let e: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok(clamp_entropy(e, probs.len()))
}

fn clamp_entropy(e: f64, k: usize) -> f64 {
    e.max(0.0).min((k as f64).ln())
}

/// Entropy from log-probabilities; exact for entries whose probability
/// underflows to zero.
fn entropy_from_logs(probs: &[f64], log_probs: &[f64]) -> f64 {
    let e: f64 = probs
        .iter()
        .zip(log_probs)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &lp)| -p * lp)
        .sum();
    clamp_entropy(e, probs.len())
}

/// Logits, soft labels, entropies and pseudo-labels for a batch.
pub fn zero_shot_predict(batch: &DMatrix<f64>, classifier: &TextClassifier) -> Result<ZeroShotOutput> {
    zero_shot_predict_with(batch, &classifier.matrix(), classifier.temperature())
}

/// As [`zero_shot_predict`] with a pre-widened K x d class matrix.
pub fn zero_shot_predict_with(
    batch: &DMatrix<f64>,
    class_matrix: &DMatrix<f64>,
    temperature: f64,
) -> Result<ZeroShotOutput> {
    let logits = compute_logits_with(batch, class_matrix)?;
    let (b, k) = logits.shape();
    let mut probs = DMatrix::zeros(b, k);
    let mut entropy = Vec::with_capacity(b);
    let mut pseudo_label = Vec::with_capacity(b);
    for i in 0..b {
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        let (p, lp) = log_softmax(&row, temperature)?;
        entropy.push(entropy_from_logs(&p, &lp));
        pseudo_label.push(argmax(&p));
        for (j, v) in p.into_iter().enumerate() {
            probs[(i, j)] = v;
        }
    }
    Ok(ZeroShotOutput {
        logits,
        probs,
        entropy,
        pseudo_label,
    })
}
