//! Embedding data model and on-disk formats.
//!
//! Two binary layouts (all integers and floats little-endian):
//!
//! ```text
//! image embeddings:  "OGAE" | version: u16 | N: u32 | d: u32 | K: u32
//!                    | N*d f32 (row-major) | N u32 labels
//! text classifier:   "OGAT" | version: u16 | K: u32 | d: u32 | K*d f32
//! ```
//!
//! and a CSV layout whose first line is `d=<d>,K=<K>`, followed by one
//! `label,v1,...,vd` row per sample (or `v1,...,vd` per class for a
//! classifier file).
//!
//! Vectors are stored as `f32`, the file precision, so that writing and
//! re-reading a set is bit-exact. Every row is brought to unit norm on
//! ingestion; rows already within [`UNIT_NORM_KEEP`] of unit norm are kept
//! verbatim, which makes normalization idempotent.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OgaError, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"OGAE";
pub const CLASSIFIER_MAGIC: &[u8; 4] = b"OGAT";
pub const FORMAT_VERSION: u16 = 1;

/// Softmax temperature matching CLIP's logit scale of 100.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// Rows whose norm is within this distance of 1 are not rescaled.
pub const UNIT_NORM_KEEP: f64 = 1e-6;

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    Binary,
    Csv,
}

/// Brings `row` to unit Euclidean norm in place.
pub fn normalize_row(row: &mut [f32]) -> Result<()> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(OgaError::Validation("non-finite embedding value".into()));
    }
    let norm = row
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm < ZERO_NORM {
        return Err(OgaError::Validation("zero-norm embedding row".into()));
    }
    if (norm - 1.0).abs() > UNIT_NORM_KEEP {
        for v in row.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    Ok(())
}

fn rows_to_matrix(data: &[f32], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(rows, cols, data.iter().map(|&v| f64::from(v)))
}

/// Labelled image embeddings, one unit-norm row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Vec<f32>,
    labels: Vec<u32>,
    dim: usize,
    num_classes: usize,
}

impl EmbeddingSet {
    /// Builds a set from row-major features, normalizing every row.
    pub fn new(
        mut features: Vec<f32>,
        labels: Vec<u32>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(OgaError::Validation(format!("d must be >= 2, got {dim}")));
        }
        if num_classes < 2 {
            return Err(OgaError::Validation(format!(
                "K must be >= 2, got {num_classes}"
            )));
        }
        if labels.is_empty() {
            return Err(OgaError::Validation("embedding set is empty".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(OgaError::Validation(format!(
                "{} feature values do not form {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(OgaError::Validation(format!(
                "label {bad} out of range for K={num_classes}"
            )));
        }
        for row in features.chunks_mut(dim) {
            normalize_row(row)?;
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Features widened to `f64`, N x d.
    pub fn feature_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.features, self.len(), self.dim)
    }

    /// Same features under a different label vector.
    pub fn with_labels(&self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(OgaError::Validation(format!(
                "expected {} labels, got {}",
                self.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(OgaError::Validation(format!(
                "label {bad} out of range for K={}",
                self.num_classes
            )));
        }
        Ok(Self {
            features: self.features.clone(),
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
        })
    }
}

/// Per-class text embeddings and the softmax temperature applied to their logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TextClassifier {
    embeddings: Vec<f32>,
    num_classes: usize,
    dim: usize,
    temperature: f64,
}

impl TextClassifier {
    pub fn new(
        mut embeddings: Vec<f32>,
        num_classes: usize,
        dim: usize,
        temperature: f64,
    ) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(OgaError::Validation(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if num_classes < 2 || dim < 2 {
            return Err(OgaError::Validation(format!(
                "classifier needs K >= 2 and d >= 2, got K={num_classes}, d={dim}"
            )));
        }
        if embeddings.len() != num_classes * dim {
            return Err(OgaError::Validation(format!(
                "{} values do not form a {num_classes}x{dim} matrix",
                embeddings.len()
            )));
        }
        for row in embeddings.chunks_mut(dim) {
            normalize_row(row)?;
        }
        Ok(Self {
            embeddings,
            num_classes,
            dim,
            temperature,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    /// Class embeddings widened to `f64`, K x d.
    pub fn matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.embeddings, self.num_classes, self.dim)
    }

    /// Same embeddings, different temperature.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        Self::new(
            self.embeddings.clone(),
            self.num_classes,
            self.dim,
            temperature,
        )
    }

    /// Keeps only the listed classes, in the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        let mut embeddings = Vec::with_capacity(classes.len() * self.dim);
        for &k in classes {
            if k >= self.num_classes {
                return Err(OgaError::Validation(format!("class {k} out of range")));
            }
            embeddings.extend_from_slice(self.row(k));
        }
        Self::new(embeddings, classes.len(), self.dim, self.temperature)
    }
}

// ---------------------------------------------------------------------------
// binary format

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => OgaError::Format(format!("truncated {what}")),
        _ => OgaError::Format(format!("reading {what}: {e}")),
    })
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    read_exact_or_format(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    read_exact_or_format(r, &mut m, "magic")?;
    if &m != magic {
        return Err(OgaError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u16(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(OgaError::Format(format!(
            "unsupported format version {version}"
        )));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(()),
        Ok(_) => Err(OgaError::Format("trailing bytes after payload".into())),
        Err(e) => Err(OgaError::Format(format!("reading trailer: {e}"))),
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| OgaError::Validation(format!("{what} exceeds u32")))
}

pub fn read_embedding_set_binary<R: Read>(mut r: R) -> Result<EmbeddingSet> {
    read_header(&mut r, EMBEDDING_MAGIC)?;
    let n = read_u32(&mut r, "N")? as usize;
    let d = read_u32(&mut r, "d")? as usize;
    let k = read_u32(&mut r, "K")? as usize;
    let count = n
        .checked_mul(d)
        .ok_or_else(|| OgaError::Format("N*d overflows".into()))?;
    let features = read_f32s(&mut r, count, "feature block")?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u32(&mut r, "label block")?);
    }
    expect_eof(&mut r)?;
    EmbeddingSet::new(features, labels, d, k)
}

pub fn write_embedding_set_binary<W: Write>(set: &EmbeddingSet, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(18 + set.features.len() * 4 + set.labels.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&dim_u32(set.len(), "N")?.to_le_bytes());
    buf.extend_from_slice(&dim_u32(set.dim, "d")?.to_le_bytes());
    buf.extend_from_slice(&dim_u32(set.num_classes, "K")?.to_le_bytes());
    for v in &set.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for l in &set.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.write_all(&buf)
        .map_err(|e| OgaError::Format(format!("writing embeddings: {e}")))
}

pub fn read_text_classifier_binary<R: Read>(mut r: R, temperature: f64) -> Result<TextClassifier> {
    read_header(&mut r, CLASSIFIER_MAGIC)?;
    let k = read_u32(&mut r, "K")? as usize;
    let d = read_u32(&mut r, "d")? as usize;
    let count = k
        .checked_mul(d)
        .ok_or_else(|| OgaError::Format("K*d overflows".into()))?;
    let values = read_f32s(&mut r, count, "class embedding block")?;
    expect_eof(&mut r)?;
    TextClassifier::new(values, k, d, temperature)
}

pub fn write_text_classifier_binary<W: Write>(clf: &TextClassifier, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(14 + clf.embeddings.len() * 4);
    buf.extend_from_slice(CLASSIFIER_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&dim_u32(clf.num_classes, "K")?.to_le_bytes());
    buf.extend_from_slice(&dim_u32(clf.dim, "d")?.to_le_bytes());
    for v in &clf.embeddings {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
        .map_err(|e| OgaError::Format(format!("writing classifier: {e}")))
}

// ---------------------------------------------------------------------------
// CSV format

fn parse_csv_header(line: &str) -> Result<(usize, usize)> {
    let mut d = None;
    let mut k = None;
    for part in line.trim().split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| OgaError::Format(format!("malformed header field {part:?}")))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| OgaError::Format(format!("non-integer header value {value:?}")))?;
        match key.trim() {
            "d" => d = Some(value),
            "K" => k = Some(value),
            other => return Err(OgaError::Format(format!("unknown header key {other:?}"))),
        }
    }
    match (d, k) {
        (Some(d), Some(k)) => Ok((d, k)),
        _ => Err(OgaError::Format(
            "header must be of the form d=<d>,K=<K>".into(),
        )),
    }
}

fn parse_f32(field: &str, line_no: usize) -> Result<f32> {
    field
        .trim()
        .parse()
        .map_err(|_| OgaError::Format(format!("line {line_no}: bad number {field:?}")))
}

fn csv_lines<R: BufRead>(r: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    r.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
}

pub fn read_embedding_set_csv<R: BufRead>(r: R) -> Result<EmbeddingSet> {
    let mut lines = csv_lines(r);
    let (_, header) = lines
        .next()
        .ok_or_else(|| OgaError::Format("missing header line".into()))?;
    let header = header.map_err(|e| OgaError::Format(e.to_string()))?;
    let (d, k) = parse_csv_header(&header)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in lines {
        let line = line.map_err(|e| OgaError::Format(e.to_string()))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(OgaError::Format(format!(
                "line {line_no}: expected {} fields, got {}",
                d + 1,
                fields.len()
            )));
        }
        let label: u32 = fields[0]
            .trim()
            .parse()
            .map_err(|_| OgaError::Format(format!("line {line_no}: bad label {:?}", fields[0])))?;
        labels.push(label);
        for f in &fields[1..] {
            features.push(parse_f32(f, line_no)?);
        }
    }
    EmbeddingSet::new(features, labels, d, k)
}

pub fn write_embedding_set_csv<W: Write>(set: &EmbeddingSet, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let werr = |e: std::io::Error| OgaError::Format(format!("writing csv: {e}"));
    writeln!(w, "d={},K={}", set.dim, set.num_classes).map_err(werr)?;
    for i in 0..set.len() {
        write!(w, "{}", set.labels[i]).map_err(werr)?;
        for v in set.row(i) {
            write!(w, ",{v}").map_err(werr)?;
        }
        writeln!(w).map_err(werr)?;
    }
    w.flush().map_err(werr)
}

pub fn read_text_classifier_csv<R: BufRead>(r: R, temperature: f64) -> Result<TextClassifier> {
    let mut lines = csv_lines(r);
    let (_, header) = lines
        .next()
        .ok_or_else(|| OgaError::Format("missing header line".into()))?;
    let header = header.map_err(|e| OgaError::Format(e.to_string()))?;
    let (d, k) = parse_csv_header(&header)?;
    let mut values = Vec::with_capacity(k * d);
    let mut rows = 0;
    for (line_no, line) in lines {
        let line = line.map_err(|e| OgaError::Format(e.to_string()))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(OgaError::Format(format!(
                "line {line_no}: expected {d} values, got {}",
                fields.len()
            )));
        }
        for f in fields {
            values.push(parse_f32(f, line_no)?);
        }
        rows += 1;
    }
    if rows != k {
        return Err(OgaError::Format(format!(
            "header declares K={k} but file has {rows} rows"
        )));
    }
    TextClassifier::new(values, k, d, temperature)
}

pub fn write_text_classifier_csv<W: Write>(clf: &TextClassifier, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let werr = |e: std::io::Error| OgaError::Format(format!("writing csv: {e}"));
    writeln!(w, "d={},K={}", clf.dim, clf.num_classes).map_err(werr)?;
    for k in 0..clf.num_classes {
        let row: Vec<String> = clf.row(k).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(",")).map_err(werr)?;
    }
    w.flush().map_err(werr)
}

// ---------------------------------------------------------------------------
// path-level entry points

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| OgaError::io(path, e))
}

pub fn load_embedding_set(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let reader = open(path)?;
    match format {
        EmbeddingFormat::Binary => read_embedding_set_binary(reader),
        EmbeddingFormat::Csv => read_embedding_set_csv(reader),
    }
}

/// Loads a classifier file, detecting the binary layout by its magic bytes
/// and falling back to CSV otherwise.
pub fn load_text_classifier(path: impl AsRef<Path>, temperature: f64) -> Result<TextClassifier> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(OgaError::Validation(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let path = path.as_ref();
    let mut reader = open(path)?;
    let is_binary = reader
        .fill_buf()
        .map_err(|e| OgaError::io(path, e))?
        .starts_with(CLASSIFIER_MAGIC);
    if is_binary {
        read_text_classifier_binary(reader, temperature)
    } else {
        read_text_classifier_csv(reader, temperature)
    }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| OgaError::io(path, e))
}

pub fn save_embedding_set(
    set: &EmbeddingSet,
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
) -> Result<()> {
    let file = create(path.as_ref())?;
    match format {
        EmbeddingFormat::Binary => write_embedding_set_binary(set, BufWriter::new(file)),
        EmbeddingFormat::Csv => write_embedding_set_csv(set, file),
    }
}

pub fn save_text_classifier(
    clf: &TextClassifier,
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
) -> Result<()> {
    let file = create(path.as_ref())?;
    match format {
        EmbeddingFormat::Binary => write_text_classifier_binary(clf, BufWriter::new(file)),
        EmbeddingFormat::Csv => write_text_classifier_csv(clf, file),
    }
}

// ---------------------------------------------------------------------------
// synthetic surrogate

/// Parameters of the sphere-projected Gaussian cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Per-coordinate standard deviation of image noise before projection.
    pub dispersion: f64,
    /// Per-coordinate standard deviation of text noise before projection.
    pub text_noise: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl SyntheticSpec {
    pub fn new(
        seed: u64,
        num_classes: usize,
        dim: usize,
        per_class: usize,
        dispersion: f64,
        text_noise: f64,
    ) -> Self {
        Self {
            seed,
            num_classes,
            dim,
            per_class,
            dispersion,
            text_noise,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn project(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Draws a labelled embedding set and a matching text classifier.
///
/// Class means are uniform on the unit sphere. Samples are stored
/// class-major (all of class 0, then class 1, ...). The random stream is
/// consumed in a fixed order: means, text noise, then sample noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(EmbeddingSet, TextClassifier)> {
    if spec.num_classes < 2 || spec.dim < 2 || spec.per_class < 1 {
        return Err(OgaError::Validation(format!(
            "synthetic generator needs K >= 2, d >= 2, per_class >= 1 (got K={}, d={}, per_class={})",
            spec.num_classes, spec.dim, spec.per_class
        )));
    }
    for (name, v) in [("dispersion", spec.dispersion), ("text_noise", spec.text_noise)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(OgaError::Validation(format!(
                "{name} must be a non-negative finite number, got {v}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let mut g = gaussian_vec(&mut rng, spec.dim);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            g.iter_mut().for_each(|x| *x /= norm);
            g
        })
        .collect();

    let mut text = Vec::with_capacity(spec.num_classes * spec.dim);
    for mean in &means {
        let noise = gaussian_vec(&mut rng, spec.dim);
        let v: Vec<f64> = mean
            .iter()
            .zip(&noise)
            .map(|(m, e)| m + spec.text_noise * e)
            .collect();
        text.extend(project(&v));
    }

    let n = spec.num_classes * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            let noise = gaussian_vec(&mut rng, spec.dim);
            let v: Vec<f64> = mean
                .iter()
                .zip(&noise)
                .map(|(m, e)| m + spec.dispersion * e)
                .collect();
            features.extend(project(&v));
            labels.push(k as u32);
        }
    }

    let set = EmbeddingSet::new(features, labels, spec.dim, spec.num_classes)?;
    let clf = TextClassifier::new(text, spec.num_classes, spec.dim, spec.temperature)?;
    Ok((set, clf))
}
