//! Seeded test-set streams and the online adaptation loop.
//!
//! A run is one shuffled pass over the test set in fixed-size batches. For
//! each batch the engine computes zero-shot outputs, offers the samples to
//! the cache, refits the Gaussian model if the cache changed, predicts the
//! batch with the configured method and only then scores the predictions
//! against ground truth. The adaptation path ([`OnlineAdapter`]) never
//! receives labels.
//!
//! Stream permutations come from ChaCha8 seeded with `seed_from_u64`, fed to
//! a Fisher-Yates shuffle whose bounded draws use Lemire's multiply-shift
//! with rejection on 64-bit outputs. Both pieces are fixed here rather than
//! delegated to a library shuffle so that permutations are stable across
//! platforms and dependency upgrades.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{oga_predict, tip_adapter_predict, AdaptedPrediction, OgaConfig, TipAdapterConfig};
use crate::cache::{CacheConfig, CacheSnapshot, EntropyCache};
use crate::embedding::{EmbeddingSet, TextClassifier};
use crate::error::{OgaError, Result};
use crate::gaussian::{EstimatorKind, GaussianConfig, GaussianModel};
use crate::zeroshot::{zero_shot_predict_with, ZeroShotOutput};

pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ZeroShot,
    Oga,
    TipAdapter,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ZeroShot => "zero-shot",
            Method::Oga => "oga",
            Method::TipAdapter => "tip-adapter",
        }
    }

    pub fn uses_cache(&self) -> bool {
        !matches!(self, Method::ZeroShot)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = OgaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-shot" | "zeroshot" => Ok(Method::ZeroShot),
            "oga" => Ok(Method::Oga),
            "tip-adapter" | "tip" => Ok(Method::TipAdapter),
            other => Err(OgaError::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Order of cache update and prediction within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    #[default]
    UpdateThenPredict,
    PredictThenUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub method: Method,
    pub cache: CacheConfig,
    pub oga: OgaConfig,
    pub tip: TipAdapterConfig,
    pub gaussian: GaussianConfig,
    /// Batches between full test-set evaluations.
    pub checkpoint_every: Option<usize>,
    pub update_order: UpdateOrder,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: DEFAULT_BATCH_SIZE,
            method: Method::Oga,
            cache: CacheConfig::default(),
            oga: OgaConfig::default(),
            tip: TipAdapterConfig::default(),
            gaussian: GaussianConfig::default(),
            checkpoint_every: None,
            update_order: UpdateOrder::default(),
        }
    }
}

impl StreamConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(OgaError::Validation("batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(OgaError::Validation("checkpoint_every must be >= 1".into()));
        }
        self.cache.validate()?;
        self.oga.validate()?;
        self.tip.validate()
    }
}

fn bounded(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    // Lemire: uniform in [0, bound) from 64-bit draws
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let m = u128::from(rng.next_u64()) * u128::from(bound);
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// Uniform random permutation of `0..n` determined by `seed`.
pub fn make_stream(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = bounded(&mut rng, i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Result of one [`OnlineAdapter::process_batch`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub prediction: AdaptedPrediction,
    pub mutations: usize,
    pub refitted: bool,
}

/// Stateful adaptation for one stream: cache, current Gaussian model and
/// the configured prediction rule. Sees features and zero-shot outputs only.
#[derive(Debug, Clone)]
pub struct OnlineAdapter {
    method: Method,
    cache: EntropyCache,
    snapshot: CacheSnapshot,
    model: GaussianModel,
    oga: OgaConfig,
    tip: TipAdapterConfig,
    gaussian: GaussianConfig,
    update_order: UpdateOrder,
    temperature: f64,
}

impl OnlineAdapter {
    pub fn new(num_classes: usize, dim: usize, temperature: f64, config: &StreamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            method: config.method,
            cache: EntropyCache::new(num_classes, dim, config.cache)?,
            snapshot: CacheSnapshot::empty(num_classes, dim),
            model: GaussianModel::empty(num_classes, dim),
            oga: config.oga,
            tip: config.tip,
            gaussian: config.gaussian,
            update_order: config.update_order,
            temperature,
        })
    }

    pub fn cache(&self) -> &EntropyCache {
        &self.cache
    }

    pub fn model(&self) -> &GaussianModel {
        &self.model
    }

    /// Offers the batch to the cache and refits when anything changed.
    /// Returns the number of cache mutations.
    pub fn update(&mut self, features: &DMatrix<f64>, zs: &ZeroShotOutput) -> Result<usize> {
        if !self.method.uses_cache() {
            return Ok(0);
        }
        let mutations = self.cache.apply_batch(zs, features)?;
        if mutations > 0 {
            self.snapshot = self.cache.snapshot();
            if self.method == Method::Oga {
                self.model = GaussianModel::fit(&self.snapshot, &self.gaussian)?;
            }
        }
        Ok(mutations)
    }

    /// Predicts with the current state, leaving it untouched.
    pub fn predict(&self, features: &DMatrix<f64>, zs: &ZeroShotOutput) -> Result<AdaptedPrediction> {
        match self.method {
            Method::ZeroShot => Ok(AdaptedPrediction::from_zero_shot(zs)),
            Method::Oga => oga_predict(features, zs, &self.model, &self.oga),
            Method::TipAdapter => {
                tip_adapter_predict(features, zs, &self.snapshot, &self.tip, self.temperature)
            }
        }
    }

    pub fn process_batch(&mut self, features: &DMatrix<f64>, zs: &ZeroShotOutput) -> Result<BatchOutcome> {
        let (prediction, mutations) = match self.update_order {
            UpdateOrder::UpdateThenPredict => {
                let m = self.update(features, zs)?;
                (self.predict(features, zs)?, m)
            }
            UpdateOrder::PredictThenUpdate => {
                let p = self.predict(features, zs)?;
                (p, self.update(features, zs)?)
            }
        };
        Ok(BatchOutcome {
            prediction,
            mutations,
            refitted: mutations > 0 && self.method == Method::Oga,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub samples_seen: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefitEvent {
    pub samples_seen: usize,
    /// Cached samples behind the refitted model.
    pub n: usize,
    pub estimator: EstimatorKind,
}

/// Everything recorded for one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub seed: u64,
    /// Indexed by position in the test set, not by stream position.
    #[serde(with = "packed_bits")]
    pub per_sample_correct: Vec<bool>,
    /// Predicted class per test-set position.
    pub predictions: Vec<u32>,
    pub final_accuracy: f64,
    pub checkpoints: Vec<Checkpoint>,
    pub cache_mutations: usize,
    pub refits: Vec<RefitEvent>,
}

/// Base64 of a little-endian bit-packed `Vec<bool>` plus its length.
mod packed_bits {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Packed {
        len: usize,
        bits: String,
    }

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        Packed {
            len: bits.len(),
            bits: STANDARD.encode(bytes),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let packed = Packed::deserialize(d)?;
        let bytes = STANDARD.decode(&packed.bits).map_err(D::Error::custom)?;
        if bytes.len() != packed.len.div_ceil(8) {
            return Err(D::Error::custom("bitset length mismatch"));
        }
        Ok((0..packed.len)
            .map(|i| bytes[i / 8] & (1 << (i % 8)) != 0)
            .collect())
    }
}

/// Test-set data prepared once and shared by every run over it.
#[derive(Debug, Clone)]
pub struct StreamContext {
    features: DMatrix<f64>,
    zero_shot: ZeroShotOutput,
    labels: Vec<u32>,
    num_classes: usize,
    temperature: f64,
}

impl StreamContext {
    pub fn new(set: &EmbeddingSet, classifier: &TextClassifier) -> Result<Self> {
        if set.is_empty() {
            return Err(OgaError::Validation("cannot stream an empty set".into()));
        }
        if set.dim() != classifier.dim() {
            return Err(OgaError::Validation(format!(
                "embedding dimension {} does not match classifier dimension {}",
                set.dim(),
                classifier.dim()
            )));
        }
        if set.num_classes() != classifier.num_classes() {
            return Err(OgaError::Validation(format!(
                "embedding set has K={}, classifier K={}",
                set.num_classes(),
                classifier.num_classes()
            )));
        }
        let features = set.feature_matrix();
        let zero_shot = zero_shot_predict_with(&features, &classifier.matrix(), classifier.temperature())?;
        Ok(Self {
            features,
            zero_shot,
            labels: set.labels().to_vec(),
            num_classes: classifier.num_classes(),
            temperature: classifier.temperature(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn zero_shot(&self) -> &ZeroShotOutput {
        &self.zero_shot
    }

    pub fn zero_shot_accuracy(&self) -> f64 {
        accuracy(&self.zero_shot.pseudo_label, &self.labels)
    }

    /// Runs one stream; also returns the final adapter state.
    pub fn run_with_state(&self, config: &StreamConfig) -> Result<(RunTrace, OnlineAdapter)> {
        let n = self.len();
        let dim = self.features.ncols();
        let mut adapter = OnlineAdapter::new(self.num_classes, dim, self.temperature, config)?;
        let order = make_stream(n, config.seed);

        let mut predictions = vec![0u32; n];
        let mut correct = vec![false; n];
        let mut checkpoints = Vec::new();
        let mut refits = Vec::new();
        let mut cache_mutations = 0;
        let mut seen = 0;

        for (b, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let features = self.features.select_rows(batch_idx);
            let zs = self.zero_shot.select_rows(batch_idx);
            let outcome = adapter.process_batch(&features, &zs)?;
            cache_mutations += outcome.mutations;
            seen += batch_idx.len();
            if outcome.refitted {
                refits.push(RefitEvent {
                    samples_seen: seen,
                    n: adapter.model().n(),
                    estimator: adapter.model().estimator_used(),
                });
            }

            // labels are read only from here on
            for (&idx, &pred) in batch_idx.iter().zip(&outcome.prediction.predicted) {
                predictions[idx] = pred as u32;
                correct[idx] = pred as u32 == self.labels[idx];
            }

            if let Some(every) = config.checkpoint_every {
                if (b + 1) % every == 0 {
                    let full = adapter.predict(&self.features, &self.zero_shot)?;
                    checkpoints.push(Checkpoint {
                        samples_seen: seen,
                        accuracy: accuracy(&full.predicted, &self.labels),
                    });
                }
            }
        }

        let final_accuracy = correct.iter().filter(|&&c| c).count() as f64 / n as f64;
        Ok((
            RunTrace {
                seed: config.seed,
                per_sample_correct: correct,
                predictions,
                final_accuracy,
                checkpoints,
                cache_mutations,
                refits,
            },
            adapter,
        ))
    }

    pub fn run(&self, config: &StreamConfig) -> Result<RunTrace> {
        self.run_with_state(config).map(|(trace, _)| trace)
    }

    /// Independent runs, one per seed, executed on the current rayon pool.
    /// Output order follows `seeds`.
    pub fn run_many(&self, config: &StreamConfig, seeds: &[u64]) -> Result<Vec<RunTrace>> {
        let mut distinct = HashSet::with_capacity(seeds.len());
        if let Some(dup) = seeds.iter().find(|s| !distinct.insert(**s)) {
            return Err(OgaError::Validation(format!("duplicate seed {dup}")));
        }
        config.validate()?;
        seeds
            .par_iter()
            .map(|&seed| {
                self.run(&StreamConfig {
                    seed,
                    ..config.clone()
                })
            })
            .collect()
    }
}

fn accuracy(predicted: &[usize], labels: &[u32]) -> f64 {
    let hits = predicted
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p as u32 == l)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn run_stream(set: &EmbeddingSet, classifier: &TextClassifier, config: &StreamConfig) -> Result<RunTrace> {
    StreamContext::new(set, classifier)?.run(config)
}

pub fn run_many(
    set: &EmbeddingSet,
    classifier: &TextClassifier,
    config: &StreamConfig,
    seeds: &[u64],
) -> Result<Vec<RunTrace>> {
    StreamContext::new(set, classifier)?.run_many(config, seeds)
}
