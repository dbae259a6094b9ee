//! Online Gaussian adaptation (OGA) for zero-shot vision-language classifiers.
//!
//! The crate consumes pre-computed, L2-normalized image and text embeddings
//! and replays them as seeded streams. Along each stream, confident
//! zero-shot predictions fill a per-class entropy-ranked cache; the cache
//! yields class centroids and a pooled covariance, and the resulting
//! Gaussian likelihoods are blended with the zero-shot prior through a
//! tempered MAP rule. A Tip-Adapter style cache rule is provided as a
//! baseline, and [`harness`] runs full multi-seed experiment matrices with
//! average accuracy, standard deviation, expected tail accuracy and win
//! rates.
//!
//! Module map:
//!
//! - [`embedding`]: data model, binary and CSV formats, synthetic generator
//! - [`zeroshot`]: cosine logits, temperature softmax, entropy, pseudo-labels
//! - [`cache`]: bounded per-class low-entropy cache
//! - [`gaussian`]: centroids, pooled covariance, precision estimators
//! - [`adapters`]: MAP posterior and Tip-Adapter logits
//! - [`stream`]: stream generation and the update-then-predict loop
//! - [`metrics`]: run aggregation, tail accuracy, win rates
//! - [`harness`]: experiment configuration, execution and reports

pub mod adapters;
pub mod cache;
pub mod embedding;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod stream;
pub mod zeroshot;

pub use error::{OgaError, Result};
