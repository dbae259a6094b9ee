mod common;

use std::path::PathBuf;

use oga_core::gaussian::EstimatorPolicy;
use oga_core::harness::{
    emit_report, emit_trace_plot_data, render_report, render_trace_plot_data, run_on, write_outputs,
    ExperimentConfig, ExperimentReport, OutputConfig, ReportFormat,
};
use oga_core::stream::Method;
use oga_core::OgaError;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a checked-in file; `OGA_BLESS=1` rewrites it instead.
fn assert_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("OGA_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} drifted from the golden file");
}

fn run(cfg: &ExperimentConfig) -> ExperimentReport {
    let datasets = cfg.load_datasets().unwrap();
    run_on(cfg, &datasets).unwrap()
}

#[test]
fn protocol_matrix_matches_golden() {
    let report = run(&common::protocol_config());
    assert_golden("protocol.csv", &render_report(&report, ReportFormat::Csv).unwrap());
    assert_golden("protocol.md", &render_report(&report, ReportFormat::Markdown).unwrap());
}

#[test]
fn json_round_trip() {
    let mut cfg = ExperimentConfig::synthetic(common::baseline_source());
    cfg.n_runs = 5;
    cfg.checkpoint_every = Some(10);
    cfg.nu_values = vec![0.05, 0.25];
    let report = run(&cfg);
    let json = render_report(&report, ReportFormat::Json).unwrap();
    let back = ExperimentReport::from_json(&json).unwrap();
    assert_eq!(back, report);
    assert_eq!(render_report(&back, ReportFormat::Json).unwrap(), json);
}

#[test]
fn two_methods_one_dataset_row_counts() {
    let mut cfg = ExperimentConfig::synthetic(common::baseline_source());
    cfg.methods = vec![Method::ZeroShot, Method::Oga];
    cfg.n_runs = 3;
    let report = run(&cfg);

    let csv = render_report(&report, ReportFormat::Csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "dataset,method,batch_size,cache_size,nu,estimator,n_runs,mean_acc,std_acc,eta"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("baseline,zero-shot,32,-,-,-,3,"));
    assert!(lines[2].starts_with("baseline,oga,32,8,0.05,auto4d,3,"));

    let md = render_report(&report, ReportFormat::Markdown).unwrap();
    let sections: Vec<&str> = md.split("### ").skip(1).collect();
    assert_eq!(sections.len(), 3);
    for section in &sections[..2] {
        let rows = section.lines().filter(|l| l.starts_with("| ")).count();
        // header plus one row per method
        assert_eq!(rows, 3, "{section}");
    }
}

#[test]
fn ridge_only_matches_auto_when_cache_stays_small() {
    // 5 classes x 8 shots = 40 < 4 * 16
    let mut cfg = ExperimentConfig::synthetic(common::baseline_source());
    cfg.methods = vec![Method::Oga];
    cfg.n_runs = 10;
    cfg.nu_values = vec![0.25];
    let auto = run(&cfg);
    cfg.estimator_policies = vec![EstimatorPolicy::RidgeOnly];
    let ridge = run(&cfg);
    assert_eq!(auto.cells.len(), 1);
    assert_eq!(auto.cells[0].metrics, ridge.cells[0].metrics);
    assert_eq!(auto.win_rates, ridge.win_rates);
}

#[test]
fn estimator_policies_diverge_past_the_switch() {
    let mut cfg = common::protocol_config();
    cfg.methods = vec![Method::Oga];
    cfg.n_runs = 10;
    cfg.estimator_policies = vec![EstimatorPolicy::Auto4d, EstimatorPolicy::RidgeOnly];
    let report = run(&cfg);
    assert_eq!(report.cells.len(), 2);
    assert_ne!(report.cells[0].metrics.per_run, report.cells[1].metrics.per_run);
}

#[test]
fn trace_plot_rows() {
    let mut cfg = ExperimentConfig::synthetic(common::baseline_source());
    cfg.methods = vec![Method::Oga];
    cfg.nu_values = vec![0.0, 0.05];
    cfg.n_runs = 4;
    // 1000 samples / batch 40 = 25 batches: exactly one checkpoint per run
    cfg.batch_sizes = vec![40];
    cfg.checkpoint_every = Some(25);
    let report = run(&cfg);
    let csv = render_trace_plot_data(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "dataset,method,batch_size,cache_size,nu,estimator,run,seed,samples_seen,accuracy"
    );
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert!(lines[1..].iter().all(|l| l.contains(",1000,")));
    assert_eq!(lines[1], "baseline,oga,40,8,0,auto4d,0,0,1000,0.919");

    cfg.checkpoint_every = None;
    let bare = run(&cfg);
    assert!(matches!(render_trace_plot_data(&bare), Err(OgaError::Config(_))));
}

#[test]
fn outputs_are_written_per_format() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::synthetic(common::baseline_source());
    cfg.n_runs = 2;
    cfg.checkpoint_every = Some(5);
    cfg.output = Some(OutputConfig {
        path: dir.path().join("nested/out"),
        formats: vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown],
    });
    let report = run(&cfg);
    let written = write_outputs(&cfg, &report).unwrap();
    let names: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["out.json", "out.csv", "out.md", "out.traces.csv"]);
    let json = std::fs::read_to_string(&written[0]).unwrap();
    assert_eq!(ExperimentReport::from_json(&json).unwrap(), report);

    // overwriting goes through the same atomic path
    emit_report(&report, ReportFormat::Csv, &written[1]).unwrap();
    emit_trace_plot_data(&report, &written[3]).unwrap();
    let leftovers = std::fs::read_dir(dir.path().join("nested")).unwrap().count();
    assert_eq!(leftovers, 4);
}
