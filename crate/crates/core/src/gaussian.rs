//! Class centroids, pooled covariance and precision estimation.
//!
//! The covariance is pooled over all cached samples, each centered on its
//! own class centroid, with an unbiased `1 / (n - 1)` normalization. The
//! precision estimator depends on how many samples back it:
//!
//! - fewer than 2 samples, or zero spread: identity precision
//! - `2 <= n < 4d`: Bayes-Ridge shrinkage, `P = d (n S + tr(S) I)^-1`
//! - `n >= 4d`: the plain inverse `S^-1`
//!
//! Models are recomputed from scratch on every refit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cache::CacheSnapshot;
use crate::error::{OgaError, Result};
use crate::linalg::{spd_inverse, symmetrize};

/// Multiplier on `d` at which the automatic policy leaves the ridge estimator.
pub const INVERSE_SAMPLES_PER_DIM: usize = 4;

const JITTER_BASE: f64 = 1e-8;
const JITTER_STEPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Ridge,
    Inverse,
    IdentityFallback,
}

/// Which precision estimator is used once at least two samples are cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorPolicy {
    /// Ridge below `4d` cached samples, inverse from `4d` on.
    #[default]
    Auto4d,
    RidgeOnly,
    InverseOnly,
}

impl EstimatorPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorPolicy::Auto4d => "auto4d",
            EstimatorPolicy::RidgeOnly => "ridge-only",
            EstimatorPolicy::InverseOnly => "inverse-only",
        }
    }
}

/// How the inverse branch inverts the covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InverseMethod {
    /// Cholesky solve, retried with growing diagonal jitter.
    #[default]
    JitteredCholesky,
    /// Moore-Penrose pseudo-inverse through an SVD.
    PseudoInverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GaussianConfig {
    #[serde(default)]
    pub policy: EstimatorPolicy,
    #[serde(default)]
    pub inverse_method: InverseMethod,
}

/// Per-class means of the cached features.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    /// K x d; rows of absent classes are zero.
    pub means: DMatrix<f64>,
    pub counts: Vec<usize>,
}

impl Centroids {
    pub fn is_present(&self, k: usize) -> bool {
        self.counts[k] > 0
    }

    pub fn num_present(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

pub fn fit_centroids(snapshot: &CacheSnapshot) -> Centroids {
    let k = snapshot.num_classes();
    let mut means = DMatrix::zeros(k, snapshot.dim);
    let mut counts = vec![0; k];
    for (class, samples) in snapshot.per_class.iter().enumerate() {
        let n = samples.nrows();
        counts[class] = n;
        if n == 0 {
            continue;
        }
        let mean = samples.row_mean();
        means.row_mut(class).copy_from(&mean);
    }
    Centroids { means, counts }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub sigma: DMatrix<f64>,
    /// Total number of cached samples.
    pub n: usize,
}

impl CovarianceEstimate {
    /// No usable spread: zero or non-finite trace.
    pub fn is_degenerate(&self) -> bool {
        let tr = self.sigma.trace();
        !(tr.is_finite() && tr > 0.0)
    }
}

/// Pooled within-class covariance of the snapshot.
pub fn fit_covariance(snapshot: &CacheSnapshot, centroids: &Centroids) -> Result<CovarianceEstimate> {
    let n = snapshot.total();
    if n < 2 {
        return Err(OgaError::DegenerateCovariance(format!(
            "need at least 2 cached samples, have {n}"
        )));
    }
    let d = snapshot.dim;
    let mut deviations = DMatrix::zeros(n, d);
    let mut r = 0;
    for (class, samples) in snapshot.per_class.iter().enumerate() {
        let mean = centroids.means.row(class);
        for i in 0..samples.nrows() {
            deviations.row_mut(r).copy_from(&(samples.row(i) - mean));
            r += 1;
        }
    }
    let mut sigma = deviations.transpose() * &deviations / (n - 1) as f64;
    symmetrize(&mut sigma);
    Ok(CovarianceEstimate { sigma, n })
}

/// `d (n S + tr(S) I)^-1`.
pub fn bayes_ridge_precision(sigma: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    let tr = sigma.trace();
    if !(tr.is_finite() && tr > 0.0) {
        return Err(OgaError::DegenerateCovariance(format!(
            "covariance trace is {tr}"
        )));
    }
    let mut shrunk = sigma * n as f64;
    for i in 0..d {
        shrunk[(i, i)] += tr;
    }
    let inv = spd_inverse(&shrunk).ok_or_else(|| {
        OgaError::Numerics("ridge-regularized covariance is not positive definite".into())
    })?;
    Ok(inv * d as f64)
}

/// `S^-1`, either through Cholesky with jitter escalation or as a
/// pseudo-inverse.
pub fn inverse_precision(sigma: &DMatrix<f64>, method: InverseMethod) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    let tr = sigma.trace();
    if !(tr.is_finite() && tr > 0.0) {
        return Err(OgaError::DegenerateCovariance(format!(
            "covariance trace is {tr}"
        )));
    }
    match method {
        InverseMethod::JitteredCholesky => {
            if let Some(p) = spd_inverse(sigma) {
                return Ok(p);
            }
            let mut jitter = JITTER_BASE * tr / d as f64;
            for _ in 0..JITTER_STEPS {
                let mut m = sigma.clone();
                for i in 0..d {
                    m[(i, i)] += jitter;
                }
                if let Some(p) = spd_inverse(&m) {
                    return Ok(p);
                }
                jitter *= 10.0;
            }
            Err(OgaError::Numerics(format!(
                "covariance not invertible after {JITTER_STEPS} jitter steps"
            )))
        }
        InverseMethod::PseudoInverse => {
            let eps = f64::EPSILON * d as f64 * sigma.amax();
            let mut p = sigma
                .clone()
                .pseudo_inverse(eps)
                .map_err(|e| OgaError::Numerics(format!("pseudo-inverse failed: {e}")))?;
            symmetrize(&mut p);
            Ok(p)
        }
    }
}

/// Chooses and computes the precision estimate for `n` cached samples.
pub fn select_precision(
    sigma: &DMatrix<f64>,
    n: usize,
    config: &GaussianConfig,
) -> Result<(DMatrix<f64>, EstimatorKind)> {
    let d = sigma.nrows();
    let tr = sigma.trace();
    if n < 2 || !(tr.is_finite() && tr > 0.0) {
        return Ok((DMatrix::identity(d, d), EstimatorKind::IdentityFallback));
    }
    let use_inverse = match config.policy {
        EstimatorPolicy::Auto4d => n >= INVERSE_SAMPLES_PER_DIM * d,
        EstimatorPolicy::RidgeOnly => false,
        EstimatorPolicy::InverseOnly => true,
    };
    if use_inverse {
        Ok((
            inverse_precision(sigma, config.inverse_method)?,
            EstimatorKind::Inverse,
        ))
    } else {
        Ok((bayes_ridge_precision(sigma, n)?, EstimatorKind::Ridge))
    }
}

/// Shared-covariance Gaussian class model.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    centroids: Centroids,
    covariance: Option<DMatrix<f64>>,
    precision: DMatrix<f64>,
    n: usize,
    estimator_used: EstimatorKind,
    /// Row k holds `P mu_k`.
    projected_means: DMatrix<f64>,
    /// `mu_k^T P mu_k`.
    mean_energy: Vec<f64>,
}

impl GaussianModel {
    /// Model with no evidence: every class absent, identity precision.
    pub fn empty(num_classes: usize, dim: usize) -> Self {
        Self::assemble(
            Centroids {
                means: DMatrix::zeros(num_classes, dim),
                counts: vec![0; num_classes],
            },
            None,
            DMatrix::identity(dim, dim),
            0,
            EstimatorKind::IdentityFallback,
        )
    }

    /// Full recomputation from a cache snapshot.
    ///
    /// Any degeneracy (too few samples, zero spread, an inverse that cannot
    /// be recovered) falls back to identity precision.
    pub fn fit(snapshot: &CacheSnapshot, config: &GaussianConfig) -> Result<Self> {
        let centroids = fit_centroids(snapshot);
        let d = snapshot.dim;
        let n = snapshot.total();
        let covariance = match fit_covariance(snapshot, &centroids) {
            Ok(est) => Some(est.sigma),
            Err(OgaError::DegenerateCovariance(_)) => None,
            Err(e) => return Err(e),
        };
        let (precision, kind) = match &covariance {
            Some(sigma) => match select_precision(sigma, n, config) {
                Ok(sel) => sel,
                Err(OgaError::Numerics(_) | OgaError::DegenerateCovariance(_)) => {
                    (DMatrix::identity(d, d), EstimatorKind::IdentityFallback)
                }
                Err(e) => return Err(e),
            },
            None => (DMatrix::identity(d, d), EstimatorKind::IdentityFallback),
        };
        Ok(Self::assemble(centroids, covariance, precision, n, kind))
    }

    fn assemble(
        centroids: Centroids,
        covariance: Option<DMatrix<f64>>,
        precision: DMatrix<f64>,
        n: usize,
        estimator_used: EstimatorKind,
    ) -> Self {
        let projected_means = &centroids.means * &precision;
        let mean_energy = (0..centroids.num_classes())
            .map(|k| projected_means.row(k).dot(&centroids.means.row(k)))
            .collect();
        Self {
            centroids,
            covariance,
            precision,
            n,
            estimator_used,
            projected_means,
            mean_energy,
        }
    }

    /// Same centroids and bookkeeping with a replaced precision matrix.
    pub fn with_precision(self, precision: DMatrix<f64>) -> Self {
        Self::assemble(
            self.centroids,
            self.covariance,
            precision,
            self.n,
            self.estimator_used,
        )
    }

    pub fn centroids(&self) -> &Centroids {
        &self.centroids
    }

    /// `None` when fewer than two samples are cached.
    pub fn covariance(&self) -> Option<&DMatrix<f64>> {
        self.covariance.as_ref()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Number of cached samples behind the model.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn estimator_used(&self) -> EstimatorKind {
        self.estimator_used
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.precision.nrows()
    }

    /// `(f - mu_k)^T P (f - mu_k)` evaluated directly.
    pub fn mahalanobis_sq(&self, feature: &[f64], class: usize) -> f64 {
        let diff = DVector::from_iterator(
            feature.len(),
            feature
                .iter()
                .zip(self.centroids.means.row(class).iter())
                .map(|(f, m)| f - m),
        );
        diff.dot(&(&self.precision * &diff))
    }

    /// Squared Mahalanobis distances of every batch row to every centroid,
    /// B x K, using `f^T P f - 2 f^T P mu_k + mu_k^T P mu_k`.
    pub fn mahalanobis_sq_batch(&self, batch: &DMatrix<f64>) -> DMatrix<f64> {
        let projected = batch * &self.precision;
        let cross = batch * self.projected_means.transpose();
        let (b, k) = (batch.nrows(), self.num_classes());
        let mut out = DMatrix::zeros(b, k);
        for i in 0..b {
            let self_energy = projected.row(i).dot(&batch.row(i));
            for j in 0..k {
                out[(i, j)] = (self_energy - 2.0 * cross[(i, j)] + self.mean_energy[j]).max(0.0);
            }
        }
        out
    }
}

/// Alias for [`GaussianModel::fit`]; the previous model carries no state
/// into the new one.
pub fn refit(snapshot: &CacheSnapshot, config: &GaussianConfig) -> Result<GaussianModel> {
    GaussianModel::fit(snapshot, config)
}
