use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellReport, CellSpec, ExperimentReport};
use crate::error::{OgaError, Result};
use crate::stream::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    #[serde(rename = "md", alias = "markdown")]
    Markdown,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = OgaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(OgaError::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)
                .map_err(|e| OgaError::Format(format!("report json: {e}")))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => Ok(render_csv(report)),
        ReportFormat::Markdown => Ok(render_markdown(report)),
    }
}

/// Renders and writes atomically: the file is either absent or complete.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), render_report(report, format)?.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| OgaError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| OgaError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| OgaError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| OgaError::io(path, e))?;
    tmp.persist(path).map_err(|e| OgaError::io(path, e.error))?;
    Ok(())
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn render_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("dataset,method,batch_size,cache_size,nu,estimator,n_runs,mean_acc,std_acc,eta\n");
    for c in &report.cells {
        let m = &c.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            c.dataset,
            c.cell.method,
            c.cell.batch_size,
            opt(c.cell.cache_size),
            opt(c.cell.nu),
            opt(c.cell.estimator.map(|p| p.as_str())),
            m.n_runs,
            m.mean_accuracy,
            m.std_accuracy,
            m.eta
        );
    }
    out
}

fn method_title(m: Method) -> &'static str {
    match m {
        Method::ZeroShot => "Zero-shot",
        Method::Oga => "OGA",
        Method::TipAdapter => "Tip-Adapter",
    }
}

/// Which ablation axes take more than one value anywhere in the report.
struct Varying {
    batch: bool,
    cache: bool,
    nu: bool,
    estimator: bool,
}

impl Varying {
    fn of(cells: &[CellReport]) -> Self {
        fn many<T: PartialEq>(vals: impl Iterator<Item = T>) -> bool {
            let mut first = None;
            for v in vals {
                match &first {
                    None => first = Some(v),
                    Some(f) if *f != v => return true,
                    _ => {}
                }
            }
            false
        }
        Self {
            batch: many(cells.iter().map(|c| c.cell.batch_size)),
            cache: many(cells.iter().filter_map(|c| c.cell.cache_size)),
            nu: many(cells.iter().filter_map(|c| c.cell.nu.map(f64::to_bits))),
            estimator: many(cells.iter().filter_map(|c| c.cell.estimator)),
        }
    }

    fn label(&self, cell: &CellSpec) -> String {
        let mut parts = Vec::new();
        if self.batch {
            parts.push(format!("bs={}", cell.batch_size));
        }
        if let (true, Some(c)) = (self.cache, cell.cache_size) {
            parts.push(format!("cache={c}"));
        }
        if let (true, Some(nu)) = (self.nu, cell.nu) {
            parts.push(format!("ν={nu}"));
        }
        if let (true, Some(p)) = (self.estimator, cell.estimator) {
            parts.push(p.as_str().to_string());
        }
        if parts.is_empty() {
            method_title(cell.method).to_string()
        } else {
            format!("{} ({})", method_title(cell.method), parts.join(", "))
        }
    }
}

fn table(out: &mut String, title: &str, datasets: &[&str], rows: &[(String, Vec<Option<String>>)]) {
    let _ = writeln!(out, "### {title}\n");
    let _ = writeln!(out, "| Method | {} |", datasets.join(" | "));
    let _ = writeln!(out, "|---|{}", "---:|".repeat(datasets.len()));
    for (label, vals) in rows {
        let cols: Vec<String> = vals.iter().map(|v| v.clone().unwrap_or_else(|| "-".into())).collect();
        let _ = writeln!(out, "| {label} | {} |", cols.join(" | "));
    }
    out.push('\n');
}

fn render_markdown(report: &ExperimentReport) -> String {
    let datasets = report.datasets();
    let varying = Varying::of(&report.cells);

    // one row per distinct cell, in first-seen order
    let mut specs: Vec<CellSpec> = Vec::new();
    for c in &report.cells {
        if !specs.contains(&c.cell) {
            specs.push(c.cell);
        }
    }
    let lookup = |spec: &CellSpec, ds: &str| report.cells.iter().find(|c| c.cell == *spec && c.dataset == ds);
    let rows = |f: &dyn Fn(&CellReport) -> String| -> Vec<(String, Vec<Option<String>>)> {
        specs
            .iter()
            .map(|s| {
                let vals = datasets.iter().map(|ds| lookup(s, ds).map(f)).collect();
                (varying.label(s), vals)
            })
            .collect()
    };

    let mut out = format!(
        "## Results ({} runs, seeds {}..={})\n\n",
        report.seeds.len(),
        report.seeds.first().copied().unwrap_or(0),
        report.seeds.last().copied().unwrap_or(0)
    );
    table(
        &mut out,
        "Average accuracy (%, mean ± std)",
        &datasets,
        &rows(&|c| {
            format!(
                "{:.2} ± {:.2}",
                100.0 * c.metrics.mean_accuracy,
                100.0 * c.metrics.std_accuracy
            )
        }),
    );
    table(
        &mut out,
        "Expected tail accuracy (%, worst 10% of runs)",
        &datasets,
        &rows(&|c| format!("{:.2}", 100.0 * c.metrics.eta)),
    );

    if !report.win_rates.is_empty() {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for w in &report.win_rates {
            let p = (w.a.clone(), w.b.clone());
            if !pairs.contains(&p) {
                pairs.push(p);
            }
        }
        let id_label = |id: &str| {
            specs
                .iter()
                .find(|s| s.id() == id)
                .map_or_else(|| id.to_string(), |s| varying.label(s))
        };
        let win_rows: Vec<(String, Vec<Option<String>>)> = pairs
            .iter()
            .map(|(a, b)| {
                let vals = datasets
                    .iter()
                    .map(|ds| {
                        report
                            .win_rates
                            .iter()
                            .find(|w| w.dataset == *ds && w.a == *a && w.b == *b)
                            .map(|w| format!("{:.0}", 100.0 * w.rate))
                    })
                    .collect();
                (format!("{} > {}", id_label(a), id_label(b)), vals)
            })
            .collect();
        table(&mut out, "Win rate (% of runs strictly better)", &datasets, &win_rows);
    }
    out
}

/// Long-format checkpoint traces, one row per run and checkpoint.
pub fn render_trace_plot_data(report: &ExperimentReport) -> Result<String> {
    if report.cells.iter().all(|c| c.checkpoints.iter().all(Vec::is_empty)) {
        return Err(OgaError::Config(
            "report has no checkpoint traces; run with checkpoint_every set".into(),
        ));
    }
    let mut out =
        String::from("dataset,method,batch_size,cache_size,nu,estimator,run,seed,samples_seen,accuracy\n");
    for c in &report.cells {
        for (run, trace) in c.checkpoints.iter().enumerate() {
            let seed = report.seeds.get(run).copied().unwrap_or(run as u64);
            for cp in trace {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    c.dataset,
                    c.cell.method,
                    c.cell.batch_size,
                    opt(c.cell.cache_size),
                    opt(c.cell.nu),
                    opt(c.cell.estimator.map(|p| p.as_str())),
                    run,
                    seed,
                    cp.samples_seen,
                    cp.accuracy
                );
            }
        }
    }
    Ok(out)
}

pub fn emit_trace_plot_data(report: &ExperimentReport, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), render_trace_plot_data(report)?.as_bytes())
}
