//! Experiment matrices: datasets x methods x ablation axes x seeded runs.
//!
//! Every cell of an experiment sees the same seeds,
//! `base_seed, base_seed + 1, ..., base_seed + n_runs - 1`, and therefore
//! the same stream permutations, so per-run accuracies are aligned across
//! cells and win rates compare like with like.
//!
//! Configuration is TOML:
//!
//! ```toml
//! methods = ["zero-shot", "oga", "tip-adapter"]
//! n_runs = 100
//! base_seed = 0
//! batch_sizes = [32]
//! cache_sizes = [8]
//! nu_values = [0.05]
//! estimator_policies = ["auto4d"]      # auto4d | ridge-only | inverse-only
//! checkpoint_every = 8                 # optional, in batches
//!
//! [[datasets]]
//! name = "imagenet"
//! embeddings = "imagenet.ogae"
//! format = "binary"                    # binary | csv
//! classifier = "imagenet_text.ogat"
//! temperature = 0.01
//!
//! # or, instead of [[datasets]]:
//! # [[synthetic]]
//! # name = "synth"
//! # seed = 7
//! # num_classes = 20
//! # dim = 32
//! # per_class = 100
//! # dispersion = 0.3
//! # text_noise = 0.15
//!
//! [output]
//! path = "results/report"              # extension added per format
//! formats = ["json", "csv", "md"]
//! ```
//!
//! The worker pool size is read from `OGA_WORKERS` (default: rayon's).

mod report;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{AbsentClassPolicy, OgaConfig, TipAdapterConfig, DEFAULT_NU};
use crate::cache::{CacheConfig, DEFAULT_SHOTS_PER_CLASS};
use crate::embedding::{
    generate_synthetic, load_embedding_set, load_text_classifier, EmbeddingFormat, EmbeddingSet,
    SyntheticSpec, TextClassifier, DEFAULT_TEMPERATURE,
};
use crate::error::{OgaError, Result};
use crate::gaussian::{EstimatorPolicy, GaussianConfig, InverseMethod};
use crate::metrics::{summarize, win_rate, MetricsReport};
use crate::stream::{Checkpoint, Method, StreamConfig, StreamContext, UpdateOrder, DEFAULT_BATCH_SIZE};

pub use report::{emit_report, emit_trace_plot_data, render_report, render_trace_plot_data, write_atomic, ReportFormat};

/// Environment variable holding the worker-pool size.
pub const WORKERS_ENV: &str = "OGA_WORKERS";

pub const DEFAULT_N_RUNS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub name: String,
    pub embeddings: PathBuf,
    #[serde(default = "default_format")]
    pub format: EmbeddingFormat,
    pub classifier: PathBuf,
    /// Overrides the experiment-wide temperature.
    pub temperature: Option<f64>,
}

fn default_format() -> EmbeddingFormat {
    EmbeddingFormat::Binary
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub dispersion: f64,
    pub text_noise: f64,
}

impl SyntheticSource {
    pub fn spec(&self, temperature: f64) -> SyntheticSpec {
        SyntheticSpec {
            temperature,
            ..SyntheticSpec::new(
                self.seed,
                self.num_classes,
                self.dim,
                self.per_class,
                self.dispersion,
                self.text_noise,
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub path: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub datasets: Vec<DatasetSource>,
    #[serde(default)]
    pub synthetic: Vec<SyntheticSource>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_cache_sizes")]
    pub cache_sizes: Vec<usize>,
    #[serde(default = "default_nu_values")]
    pub nu_values: Vec<f64>,
    #[serde(default = "default_policies")]
    pub estimator_policies: Vec<EstimatorPolicy>,
    #[serde(default)]
    pub inverse_method: InverseMethod,
    #[serde(default)]
    pub absent_class: AbsentClassPolicy,
    #[serde(default)]
    pub update_order: UpdateOrder,
    #[serde(default)]
    pub tip: TipAdapterConfig,
    pub checkpoint_every: Option<usize>,
    pub output: Option<OutputConfig>,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_methods() -> Vec<Method> {
    vec![Method::ZeroShot, Method::Oga, Method::TipAdapter]
}
fn default_n_runs() -> usize {
    DEFAULT_N_RUNS
}
fn default_batch_sizes() -> Vec<usize> {
    vec![DEFAULT_BATCH_SIZE]
}
fn default_cache_sizes() -> Vec<usize> {
    vec![DEFAULT_SHOTS_PER_CLASS]
}
fn default_nu_values() -> Vec<f64> {
    vec![DEFAULT_NU]
}
fn default_policies() -> Vec<EstimatorPolicy> {
    vec![EstimatorPolicy::Auto4d]
}

impl ExperimentConfig {
    /// Defaults for everything, with one synthetic dataset.
    pub fn synthetic(source: SyntheticSource) -> Self {
        Self {
            datasets: Vec::new(),
            synthetic: vec![source],
            temperature: DEFAULT_TEMPERATURE,
            methods: default_methods(),
            n_runs: DEFAULT_N_RUNS,
            base_seed: 0,
            batch_sizes: default_batch_sizes(),
            cache_sizes: default_cache_sizes(),
            nu_values: default_nu_values(),
            estimator_policies: default_policies(),
            inverse_method: InverseMethod::default(),
            absent_class: AbsentClassPolicy::default(),
            update_order: UpdateOrder::default(),
            tip: TipAdapterConfig::default(),
            checkpoint_every: None,
            output: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| OgaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset and output paths are resolved
    /// against the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| OgaError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            for ds in &mut cfg.datasets {
                ds.embeddings = dir.join(&ds.embeddings);
                ds.classifier = dir.join(&ds.classifier);
            }
            if let Some(out) = &mut cfg.output {
                out.path = dir.join(&out.path);
            }
        }
        Ok(cfg)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_runs as u64)
            .map(|r| self.base_seed.wrapping_add(r))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let conflict = |msg: String| Err(OgaError::Config(msg));
        if self.datasets.is_empty() == self.synthetic.is_empty() {
            return conflict("specify either [[datasets]] or [[synthetic]], not both or neither".into());
        }
        let mut names = HashSet::new();
        for name in self
            .datasets
            .iter()
            .map(|d| &d.name)
            .chain(self.synthetic.iter().map(|s| &s.name))
        {
            if !names.insert(name) {
                return conflict(format!("duplicate dataset name {name:?}"));
            }
        }
        if self.n_runs == 0 {
            return conflict("n_runs must be >= 1".into());
        }
        if self.methods.is_empty() {
            return conflict("methods list is empty".into());
        }
        if has_duplicates(&self.methods) {
            return conflict("methods list has duplicates".into());
        }
        for (axis, empty) in [
            ("batch_sizes", self.batch_sizes.is_empty()),
            ("cache_sizes", self.cache_sizes.is_empty()),
            ("nu_values", self.nu_values.is_empty()),
            ("estimator_policies", self.estimator_policies.is_empty()),
        ] {
            if empty {
                return conflict(format!("{axis} is empty"));
            }
        }
        if has_duplicates(&self.batch_sizes)
            || has_duplicates(&self.cache_sizes)
            || has_duplicates(&self.estimator_policies)
            || has_duplicates(&self.nu_values.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        {
            return conflict("ablation axes must not repeat values".into());
        }
        if self.batch_sizes.contains(&0) {
            return conflict("batch sizes must be >= 1".into());
        }
        for &c in &self.cache_sizes {
            CacheConfig::new(c).map_err(|e| OgaError::Config(e.to_string()))?;
        }
        for &nu in &self.nu_values {
            OgaConfig::with_nu(nu).map_err(|e| OgaError::Config(e.to_string()))?;
        }
        self.tip.validate().map_err(|e| OgaError::Config(e.to_string()))?;
        let temps = std::iter::once(self.temperature)
            .chain(self.datasets.iter().filter_map(|d| d.temperature));
        for t in temps {
            if !(t.is_finite() && t > 0.0) {
                return conflict(format!("temperature must be positive, got {t}"));
            }
        }
        if self.checkpoint_every == Some(0) {
            return conflict("checkpoint_every must be >= 1".into());
        }
        if let Some(out) = &self.output {
            if out.formats.is_empty() {
                return conflict("output.formats is empty".into());
            }
        }
        Ok(())
    }

    /// Loads or generates every dataset, in config order.
    pub fn load_datasets(&self) -> Result<Vec<(String, EmbeddingSet, TextClassifier)>> {
        let mut out = Vec::new();
        for ds in &self.datasets {
            let set = load_embedding_set(&ds.embeddings, ds.format)?;
            let clf = load_text_classifier(&ds.classifier, ds.temperature.unwrap_or(self.temperature))?;
            out.push((ds.name.clone(), set, clf));
        }
        for syn in &self.synthetic {
            let (set, clf) = generate_synthetic(&syn.spec(self.temperature))?;
            out.push((syn.name.clone(), set, clf));
        }
        Ok(out)
    }

    /// The experiment cells for one dataset, in report order.
    pub fn cells(&self) -> Vec<CellSpec> {
        let mut cells = Vec::new();
        for &batch_size in &self.batch_sizes {
            for &method in &self.methods {
                match method {
                    Method::ZeroShot => cells.push(CellSpec {
                        method,
                        batch_size,
                        cache_size: None,
                        nu: None,
                        estimator: None,
                    }),
                    Method::TipAdapter => {
                        for &c in &self.cache_sizes {
                            cells.push(CellSpec {
                                method,
                                batch_size,
                                cache_size: Some(c),
                                nu: None,
                                estimator: None,
                            });
                        }
                    }
                    Method::Oga => {
                        for &c in &self.cache_sizes {
                            for &nu in &self.nu_values {
                                for &p in &self.estimator_policies {
                                    cells.push(CellSpec {
                                        method,
                                        batch_size,
                                        cache_size: Some(c),
                                        nu: Some(nu),
                                        estimator: Some(p),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        cells
    }

    fn stream_config(&self, cell: &CellSpec) -> StreamConfig {
        StreamConfig {
            seed: self.base_seed,
            batch_size: cell.batch_size,
            method: cell.method,
            cache: CacheConfig {
                shots_per_class: cell.cache_size.unwrap_or(DEFAULT_SHOTS_PER_CLASS),
            },
            oga: OgaConfig {
                nu: cell.nu.unwrap_or(DEFAULT_NU),
                absent_class: self.absent_class,
            },
            tip: self.tip,
            gaussian: GaussianConfig {
                policy: cell.estimator.unwrap_or_default(),
                inverse_method: self.inverse_method,
            },
            checkpoint_every: self.checkpoint_every,
            update_order: self.update_order,
        }
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items
        .iter()
        .enumerate()
        .any(|(i, a)| items[..i].iter().any(|b| a == b))
}

/// One point of the ablation grid. Axes a method ignores are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub method: Method,
    pub batch_size: usize,
    pub cache_size: Option<usize>,
    pub nu: Option<f64>,
    pub estimator: Option<EstimatorPolicy>,
}

impl CellSpec {
    /// Stable identifier such as `oga/bs32/cache8/nu0.05/auto4d`.
    pub fn id(&self) -> String {
        let mut id = format!("{}/bs{}", self.method, self.batch_size);
        if let Some(c) = self.cache_size {
            id.push_str(&format!("/cache{c}"));
        }
        if let Some(nu) = self.nu {
            id.push_str(&format!("/nu{nu}"));
        }
        if let Some(p) = self.estimator {
            id.push_str(&format!("/{}", p.as_str()));
        }
        id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub dataset: String,
    #[serde(flatten)]
    pub cell: CellSpec,
    pub metrics: MetricsReport,
    /// Per-run checkpoint traces, in seed order; empty without checkpointing.
    pub checkpoints: Vec<Vec<Checkpoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateEntry {
    pub dataset: String,
    /// Cell id of the method counted as winning.
    pub a: String,
    pub b: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub zero_shot_accuracy: Vec<(String, f64)>,
    pub cells: Vec<CellReport>,
    pub win_rates: Vec<WinRateEntry>,
}

impl ExperimentReport {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| OgaError::Format(format!("report json: {e}")))
    }

    pub fn datasets(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for c in &self.cells {
            if !seen.contains(&c.dataset.as_str()) {
                seen.push(c.dataset.as_str());
            }
        }
        seen
    }
}

/// Builds the rayon pool, sized from `OGA_WORKERS` when set.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| OgaError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(OgaError::Config(format!("{WORKERS_ENV} must be >= 1")));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| OgaError::Config(format!("worker pool: {e}")))
}

/// Runs every cell on every dataset and assembles the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let datasets = cfg.load_datasets()?;
    let pool = worker_pool()?;
    pool.install(|| run_on(cfg, &datasets))
}

/// As [`run_experiment`], on already loaded datasets and the current pool.
pub fn run_on(
    cfg: &ExperimentConfig,
    datasets: &[(String, EmbeddingSet, TextClassifier)],
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let mut cells = Vec::new();
    let mut zero_shot_accuracy = Vec::new();
    for (name, set, clf) in datasets {
        let ctx = StreamContext::new(set, clf)?;
        zero_shot_accuracy.push((name.clone(), ctx.zero_shot_accuracy()));
        for cell in cfg.cells() {
            let traces = ctx.run_many(&cfg.stream_config(&cell), &seeds)?;
            let metrics = summarize(&traces)?;
            let checkpoints = if cfg.checkpoint_every.is_some() {
                traces.into_iter().map(|t| t.checkpoints).collect()
            } else {
                Vec::new()
            };
            cells.push(CellReport {
                dataset: name.clone(),
                cell,
                metrics,
                checkpoints,
            });
        }
    }
    let win_rates = pairwise_win_rates(&cells)?;
    Ok(ExperimentReport {
        seeds,
        zero_shot_accuracy,
        cells,
        win_rates,
    })
}

/// Win rates for every ordered pair of cells with different methods on the
/// same dataset and batch size.
fn pairwise_win_rates(cells: &[CellReport]) -> Result<Vec<WinRateEntry>> {
    let mut out = Vec::new();
    for a in cells {
        for b in cells {
            if a.dataset != b.dataset
                || a.cell.batch_size != b.cell.batch_size
                || a.cell.method == b.cell.method
            {
                continue;
            }
            out.push(WinRateEntry {
                dataset: a.dataset.clone(),
                a: a.cell.id(),
                b: b.cell.id(),
                rate: win_rate(&a.metrics.per_run, &b.metrics.per_run)?,
            });
        }
    }
    Ok(out)
}

/// Writes `class,entropy,...` cache dumps of the first seed for every
/// cache-based cell, one file per dataset and cell. Returns the paths.
pub fn dump_caches(cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| OgaError::io(dir, e))?;
    let mut written = Vec::new();
    for (name, set, clf) in cfg.load_datasets()? {
        let ctx = StreamContext::new(&set, &clf)?;
        for cell in cfg.cells().into_iter().filter(|c| c.method.uses_cache()) {
            let (_, adapter) = ctx.run_with_state(&cfg.stream_config(&cell))?;
            let mut buf = Vec::new();
            adapter
                .cache()
                .dump_csv(&mut buf)
                .map_err(|e| OgaError::io(dir, e))?;
            let file = dir.join(format!("{}__{}.cache.csv", name, cell.id().replace('/', "_")));
            write_atomic(&file, &buf)?;
            written.push(file);
        }
    }
    Ok(written)
}

/// Emits every configured output format next to `output.path`.
pub fn write_outputs(cfg: &ExperimentConfig, report: &ExperimentReport) -> Result<Vec<PathBuf>> {
    let Some(out) = &cfg.output else {
        return Ok(Vec::new());
    };
    let mut written = Vec::new();
    for &format in &out.formats {
        let path = out.path.with_extension(format.extension());
        emit_report(report, format, &path)?;
        written.push(path);
    }
    if cfg.checkpoint_every.is_some() {
        let path = out.path.with_extension("traces.csv");
        emit_trace_plot_data(report, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::synthetic(SyntheticSource {
            name: "tiny".into(),
            seed: 3,
            num_classes: 4,
            dim: 8,
            per_class: 20,
            dispersion: 0.3,
            text_noise: 0.2,
        });
        cfg.n_runs = 6;
        cfg
    }

    #[test]
    fn toml_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            [[synthetic]]
            name = "s"
            seed = 1
            num_classes = 3
            dim = 4
            per_class = 5
            dispersion = 0.1
            text_noise = 0.1
            "#,
        )
        .unwrap();
        assert_eq!(cfg.n_runs, 100);
        assert_eq!(cfg.batch_sizes, vec![32]);
        assert_eq!(cfg.cache_sizes, vec![8]);
        assert_eq!(cfg.nu_values, vec![0.05]);
        assert_eq!(cfg.estimator_policies, vec![EstimatorPolicy::Auto4d]);
        assert_eq!(cfg.temperature, 0.01);
        assert_eq!(cfg.methods, default_methods());
    }

    #[test]
    fn conflicting_configs() {
        let both = r#"
            [[synthetic]]
            name = "s"
            seed = 1
            num_classes = 3
            dim = 4
            per_class = 5
            dispersion = 0.1
            text_noise = 0.1
            [[datasets]]
            name = "d"
            embeddings = "a"
            classifier = "b"
        "#;
        assert!(matches!(ExperimentConfig::from_toml_str(both), Err(OgaError::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("n_runs = 3"), Err(OgaError::Config(_))));

        let mut cfg = tiny();
        cfg.methods = vec![Method::Oga, Method::Oga];
        assert!(matches!(cfg.validate(), Err(OgaError::Config(_))));
        let mut cfg = tiny();
        cfg.nu_values = vec![-1.0];
        assert!(matches!(cfg.validate(), Err(OgaError::Config(_))));
        let mut cfg = tiny();
        cfg.n_runs = 0;
        assert!(matches!(cfg.validate(), Err(OgaError::Config(_))));
        let mut cfg = tiny();
        cfg.checkpoint_every = Some(0);
        assert!(matches!(cfg.validate(), Err(OgaError::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml_str("bogus_key = 1"),
            Err(OgaError::Config(_))
        ));
    }

    #[test]
    fn cell_grid() {
        let mut cfg = tiny();
        cfg.nu_values = vec![0.05, 0.25];
        cfg.cache_sizes = vec![4, 8];
        let cells = cfg.cells();
        // zero-shot 1 + tip 2 + oga 2*2
        assert_eq!(cells.len(), 7);
        assert_eq!(cells[0].id(), "zero-shot/bs32");
        assert_eq!(cells[1].id(), "oga/bs32/cache4/nu0.05/auto4d");
        assert_eq!(cells[6].id(), "tip-adapter/bs32/cache8");
    }

    #[test]
    fn seeds_are_shared_across_cells() {
        let cfg = tiny();
        let datasets = cfg.load_datasets().unwrap();
        let report = run_on(&cfg, &datasets).unwrap();
        assert_eq!(report.seeds, (0..6).collect::<Vec<u64>>());
        assert_eq!(report.cells.len(), 3);
        for c in &report.cells {
            assert_eq!(c.metrics.n_runs, 6);
        }
        // zero-shot is stream-independent
        let zs = &report.cells[0].metrics;
        assert!(zs.per_run.iter().all(|&a| a == report.zero_shot_accuracy[0].1));
        assert_eq!(report.win_rates.len(), 6);
    }

    #[test]
    fn ridge_only_matches_auto_below_threshold() {
        // K * shots = 4 * 8 = 32 = 4d for d = 8 would cross; use d = 16 so n < 4d always
        let mut cfg = tiny();
        cfg.synthetic[0].dim = 16;
        cfg.methods = vec![Method::Oga];
        let datasets = cfg.load_datasets().unwrap();
        let auto = run_on(&cfg, &datasets).unwrap();
        cfg.estimator_policies = vec![EstimatorPolicy::RidgeOnly];
        let ridge = run_on(&cfg, &datasets).unwrap();
        assert_eq!(auto.cells[0].metrics, ridge.cells[0].metrics);
    }
}
