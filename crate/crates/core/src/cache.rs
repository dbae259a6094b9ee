//! Per-class bounded cache of confident stream samples.
//!
//! Samples are filed under their zero-shot pseudo-label. While a class list
//! has room, every sample is appended. Once full, a newcomer replaces the
//! highest-entropy entry if and only if its own entropy is strictly lower;
//! at most one entry is evicted per offer. Among equal maximal entropies
//! the oldest entry is evicted.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{OgaError, Result};
use crate::zeroshot::ZeroShotOutput;

pub const DEFAULT_SHOTS_PER_CLASS: usize = 8;

const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub shots_per_class: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            shots_per_class: DEFAULT_SHOTS_PER_CLASS,
        }
    }
}

impl CacheConfig {
    pub fn new(shots_per_class: usize) -> Result<Self> {
        let cfg = Self { shots_per_class };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots_per_class == 0 {
            return Err(OgaError::Validation("shots_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub feature: Vec<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InsertOutcome {
    Appended,
    /// Carries the entropy of the evicted entry.
    Replaced(f64),
    Rejected,
}

impl InsertOutcome {
    pub fn is_mutation(&self) -> bool {
        !matches!(self, InsertOutcome::Rejected)
    }
}

/// Entries are kept per class in insertion order, so the first entry with
/// the maximal entropy is the oldest one.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyCache {
    classes: Vec<Vec<CacheEntry>>,
    capacity: usize,
    dim: usize,
}

impl EntropyCache {
    pub fn new(num_classes: usize, dim: usize, config: CacheConfig) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 || dim == 0 {
            return Err(OgaError::Validation(
                "cache needs at least one class and one dimension".into(),
            ));
        }
        Ok(Self {
            classes: vec![Vec::with_capacity(config.shots_per_class); num_classes],
            capacity: config.shots_per_class,
            dim,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of cached samples.
    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(Vec::is_empty)
    }

    pub fn class_entries(&self, class: usize) -> &[CacheEntry] {
        &self.classes[class]
    }

    pub fn try_insert(
        &mut self,
        feature: &[f64],
        pseudo_label: usize,
        entropy: f64,
    ) -> Result<InsertOutcome> {
        let k = self.classes.len();
        if pseudo_label >= k {
            return Err(OgaError::Validation(format!(
                "class index {pseudo_label} out of range for K={k}"
            )));
        }
        if !(entropy.is_finite() && entropy >= 0.0) {
            return Err(OgaError::Validation(format!(
                "entropy must be finite and non-negative, got {entropy}"
            )));
        }
        if feature.len() != self.dim {
            return Err(OgaError::Validation(format!(
                "feature has dimension {}, cache expects {}",
                feature.len(),
                self.dim
            )));
        }
        let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(OgaError::Validation(format!(
                "cached features must be unit norm, got norm {norm}"
            )));
        }

        let list = &mut self.classes[pseudo_label];
        let entry = CacheEntry {
            feature: feature.to_vec(),
            entropy,
        };
        if list.len() < self.capacity {
            list.push(entry);
            return Ok(InsertOutcome::Appended);
        }
        let (worst, worst_entropy) = list
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, be), (i, e)| {
                if e.entropy > be {
                    (i, e.entropy)
                } else {
                    (bi, be)
                }
            });
        if entropy < worst_entropy {
            list.remove(worst);
            list.push(entry);
            Ok(InsertOutcome::Replaced(worst_entropy))
        } else {
            Ok(InsertOutcome::Rejected)
        }
    }

    /// Offers every sample of a batch in row order; returns the number of
    /// appends plus replacements.
    pub fn apply_batch(&mut self, zs: &ZeroShotOutput, features: &DMatrix<f64>) -> Result<usize> {
        if zs.len() != features.nrows() {
            return Err(OgaError::Validation(format!(
                "zero-shot output has {} rows, features have {}",
                zs.len(),
                features.nrows()
            )));
        }
        let mut mutations = 0;
        let mut row = vec![0.0; features.ncols()];
        for i in 0..zs.len() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = features[(i, j)];
            }
            if self
                .try_insert(&row, zs.pseudo_label[i], zs.entropy[i])?
                .is_mutation()
            {
                mutations += 1;
            }
        }
        Ok(mutations)
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        let per_class = self
            .classes
            .iter()
            .map(|list| {
                DMatrix::from_row_iterator(
                    list.len(),
                    self.dim,
                    list.iter().flat_map(|e| e.feature.iter().copied()),
                )
            })
            .collect();
        CacheSnapshot {
            per_class,
            dim: self.dim,
        }
    }

    /// Writes `class,entropy,v1,...,vd` rows, classes in index order and
    /// entries in insertion order.
    pub fn dump_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "class,entropy")?;
        for j in 0..self.dim {
            write!(w, ",v{}", j + 1)?;
        }
        writeln!(w)?;
        for (k, list) in self.classes.iter().enumerate() {
            for e in list {
                write!(w, "{k},{}", e.entropy)?;
                for v in &e.feature {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Immutable copy of the cache contents, one n_k x d matrix per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSnapshot {
    pub per_class: Vec<DMatrix<f64>>,
    pub dim: usize,
}

impl CacheSnapshot {
    pub fn empty(num_classes: usize, dim: usize) -> Self {
        Self {
            per_class: vec![DMatrix::zeros(0, dim); num_classes],
            dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(|m| m.nrows()).sum()
    }
}
