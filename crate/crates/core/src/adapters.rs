//! Prediction rules layered on the zero-shot output.
//!
//! The OGA rule treats the zero-shot soft labels `y_k` as a prior and the
//! cached Gaussian model as a likelihood raised to the power `nu`:
//!
//! ```text
//! p(k | f) ∝ exp(nu * q_k) * y_k,     q_k = -1/2 (f - mu_k)^T P (f - mu_k)
//! ```
//!
//! The Gaussian normalizer is class-independent under a shared covariance,
//! so it cancels and only the quadratic term is evaluated.
//!
//! The Tip-Adapter baseline adds `alpha * sum_m exp(-beta (1 - f^T f_m))`
//! over the cached features of each class to the zero-shot logits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cache::CacheSnapshot;
use crate::error::{OgaError, Result};
use crate::gaussian::GaussianModel;
use crate::linalg::{argmax, normalize_log_weights};
use crate::zeroshot::{softmax, ZeroShotOutput};

pub const DEFAULT_NU: f64 = 0.05;
pub const DEFAULT_TIP_ALPHA: f64 = 2.0;
pub const DEFAULT_TIP_BETA: f64 = 5.0;

/// Quadratic term assigned to classes that have no cached samples yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsentClassPolicy {
    /// The smallest quadratic among present classes.
    #[default]
    MinPresent,
    /// The mean quadratic among present classes.
    MeanPresent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OgaConfig {
    pub nu: f64,
    #[serde(default)]
    pub absent_class: AbsentClassPolicy,
}

impl Default for OgaConfig {
    fn default() -> Self {
        Self {
            nu: DEFAULT_NU,
            absent_class: AbsentClassPolicy::default(),
        }
    }
}

impl OgaConfig {
    pub fn with_nu(nu: f64) -> Result<Self> {
        let cfg = Self {
            nu,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            return Err(OgaError::Validation(format!(
                "nu must be finite and non-negative, got {}",
                self.nu
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipAdapterConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TipAdapterConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_TIP_ALPHA,
            beta: DEFAULT_TIP_BETA,
        }
    }
}

impl TipAdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(OgaError::Validation(format!(
                "alpha must be finite, got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(OgaError::Validation(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedPrediction {
    /// B x K, rows sum to one.
    pub posterior: DMatrix<f64>,
    pub predicted: Vec<usize>,
}

impl AdaptedPrediction {
    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    /// Wraps the zero-shot soft labels unchanged.
    pub fn from_zero_shot(zs: &ZeroShotOutput) -> Self {
        Self {
            posterior: zs.probs.clone(),
            predicted: zs.pseudo_label.clone(),
        }
    }

    fn from_rows(rows: Vec<Vec<f64>>, num_classes: usize) -> Self {
        let mut posterior = DMatrix::zeros(rows.len(), num_classes);
        let mut predicted = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            predicted.push(argmax(row));
            for (j, &v) in row.iter().enumerate() {
                posterior[(i, j)] = v;
            }
        }
        Self {
            posterior,
            predicted,
        }
    }
}

fn fill_absent(q: &mut [f64], model: &GaussianModel, policy: AbsentClassPolicy) {
    let present: Vec<f64> = (0..q.len())
        .filter(|&k| model.centroids().is_present(k))
        .map(|k| q[k])
        .collect();
    let fill = if present.is_empty() {
        0.0
    } else {
        match policy {
            AbsentClassPolicy::MinPresent => present.iter().copied().fold(f64::INFINITY, f64::min),
            AbsentClassPolicy::MeanPresent => present.iter().sum::<f64>() / present.len() as f64,
        }
    };
    for (k, v) in q.iter_mut().enumerate() {
        if !model.centroids().is_present(k) {
            *v = fill;
        }
    }
}

/// `q_k = -1/2 (f - mu_k)^T P (f - mu_k)` for every class, absent classes
/// filled per `policy`. All zeros when no class is present.
pub fn log_likelihood_quadratic(
    feature: &[f64],
    model: &GaussianModel,
    policy: AbsentClassPolicy,
) -> Vec<f64> {
    let mut q: Vec<f64> = (0..model.num_classes())
        .map(|k| {
            if model.centroids().is_present(k) {
                -0.5 * model.mahalanobis_sq(feature, k)
            } else {
                0.0
            }
        })
        .collect();
    fill_absent(&mut q, model, policy);
    q
}

/// Batched [`log_likelihood_quadratic`], B x K.
pub fn log_likelihood_quadratic_batch(
    batch: &DMatrix<f64>,
    model: &GaussianModel,
    policy: AbsentClassPolicy,
) -> DMatrix<f64> {
    let k = model.num_classes();
    if model.centroids().num_present() == 0 {
        return DMatrix::zeros(batch.nrows(), k);
    }
    let dist = model.mahalanobis_sq_batch(batch);
    let mut out = DMatrix::zeros(batch.nrows(), k);
    let mut q = vec![0.0; k];
    for i in 0..batch.nrows() {
        for (j, v) in q.iter_mut().enumerate() {
            *v = -0.5 * dist[(i, j)];
        }
        fill_absent(&mut q, model, policy);
        for (j, &v) in q.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

/// Posterior `∝ exp(nu q_k) y_k`, normalized in the log domain.
///
/// With `nu == 0` the prior is returned unchanged.
pub fn map_posterior(prior: &[f64], quadratics: &[f64], nu: f64) -> Result<Vec<f64>> {
    if prior.len() != quadratics.len() {
        return Err(OgaError::Validation(format!(
            "prior has {} classes, quadratics {}",
            prior.len(),
            quadratics.len()
        )));
    }
    if !(nu.is_finite() && nu >= 0.0) {
        return Err(OgaError::Validation(format!("nu must be non-negative, got {nu}")));
    }
    if let Some(bad) = prior.iter().find(|&&p| !(p >= 0.0 && p.is_finite())) {
        return Err(OgaError::Validation(format!("invalid prior entry {bad}")));
    }
    if prior.iter().all(|&p| p == 0.0) {
        return Err(OgaError::Validation("prior is identically zero".into()));
    }
    let total: f64 = prior.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(OgaError::Validation(format!("prior sums to {total}, not 1")));
    }
    if nu == 0.0 {
        return Ok(prior.to_vec());
    }
    let mut log_weights = Vec::with_capacity(prior.len());
    for (&p, &q) in prior.iter().zip(quadratics) {
        let lw = nu * q + p.ln();
        if lw.is_nan() || lw == f64::INFINITY {
            return Err(OgaError::Numerics(format!(
                "non-finite log weight from q={q}, prior={p}"
            )));
        }
        log_weights.push(lw);
    }
    Ok(normalize_log_weights(&log_weights).0)
}

/// OGA predictions for a batch, rows aligned with `zs`.
pub fn oga_predict(
    batch: &DMatrix<f64>,
    zs: &ZeroShotOutput,
    model: &GaussianModel,
    config: &OgaConfig,
) -> Result<AdaptedPrediction> {
    config.validate()?;
    if batch.nrows() != zs.len() {
        return Err(OgaError::Validation(format!(
            "batch has {} rows, zero-shot output {}",
            batch.nrows(),
            zs.len()
        )));
    }
    if zs.num_classes() != model.num_classes() {
        return Err(OgaError::Validation(format!(
            "zero-shot output has {} classes, model {}",
            zs.num_classes(),
            model.num_classes()
        )));
    }
    if config.nu == 0.0 || model.centroids().num_present() == 0 {
        return Ok(AdaptedPrediction::from_zero_shot(zs));
    }
    let quad = log_likelihood_quadratic_batch(batch, model, config.absent_class);
    let rows = (0..zs.len())
        .map(|i| {
            let q: Vec<f64> = quad.row(i).iter().copied().collect();
            map_posterior(&zs.prob_row(i), &q, config.nu)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptedPrediction::from_rows(rows, zs.num_classes()))
}

/// Zero-shot logits plus the cache affinity term, one value per class.
pub fn tip_adapter_logits(
    feature: &[f64],
    zs_logits: &[f64],
    snapshot: &CacheSnapshot,
    config: &TipAdapterConfig,
) -> Vec<f64> {
    zs_logits
        .iter()
        .zip(&snapshot.per_class)
        .map(|(&l, cached)| {
            let affinity: f64 = (0..cached.nrows())
                .map(|m| {
                    let sim: f64 = cached.row(m).iter().zip(feature).map(|(a, b)| a * b).sum();
                    (-config.beta * (1.0 - sim)).exp()
                })
                .sum();
            l + config.alpha * affinity
        })
        .collect()
}

/// Batched [`tip_adapter_logits`], B x K.
pub fn tip_adapter_logits_batch(
    batch: &DMatrix<f64>,
    zs_logits: &DMatrix<f64>,
    snapshot: &CacheSnapshot,
    config: &TipAdapterConfig,
) -> DMatrix<f64> {
    let mut out = zs_logits.clone();
    if config.alpha == 0.0 {
        return out;
    }
    for (k, cached) in snapshot.per_class.iter().enumerate() {
        if cached.nrows() == 0 {
            continue;
        }
        let sims = batch * cached.transpose();
        for i in 0..batch.nrows() {
            let affinity: f64 = sims
                .row(i)
                .iter()
                .map(|&s| (-config.beta * (1.0 - s)).exp())
                .sum();
            out[(i, k)] += config.alpha * affinity;
        }
    }
    out
}

/// Tip-Adapter predictions; the posterior is the temperature softmax of the
/// adapted logits.
pub fn tip_adapter_predict(
    batch: &DMatrix<f64>,
    zs: &ZeroShotOutput,
    snapshot: &CacheSnapshot,
    config: &TipAdapterConfig,
    temperature: f64,
) -> Result<AdaptedPrediction> {
    config.validate()?;
    if batch.nrows() != zs.len() {
        return Err(OgaError::Validation(format!(
            "batch has {} rows, zero-shot output {}",
            batch.nrows(),
            zs.len()
        )));
    }
    let logits = tip_adapter_logits_batch(batch, &zs.logits, snapshot, config);
    let rows = (0..logits.nrows())
        .map(|i| {
            let row: Vec<f64> = logits.row(i).iter().copied().collect();
            softmax(&row, temperature)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptedPrediction::from_rows(rows, zs.num_classes()))
}
