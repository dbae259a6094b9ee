mod common;

use oga_core::harness::{run_on, ExperimentConfig};
use oga_core::stream::{Method, StreamConfig, StreamContext};

/// Zero-shot hits counted with plain loops over the stored f32 rows.
fn zero_shot_hits(set: &oga_core::embedding::EmbeddingSet, clf: &oga_core::embedding::TextClassifier) -> usize {
    (0..set.len())
        .filter(|&i| {
            let row = set.row(i);
            let mut best = (f64::NEG_INFINITY, 0);
            for k in 0..clf.num_classes() {
                let s: f64 = row.iter().zip(clf.row(k)).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                if s > best.0 {
                    best = (s, k);
                }
            }
            best.1 as u32 == set.labels()[i]
        })
        .count()
}

#[test]
fn baseline_zero_shot_accuracy() {
    let (set, clf) = common::generate(&common::baseline_source());
    assert_eq!(set.len(), 1000);
    assert_eq!(zero_shot_hits(&set, &clf), 919);
    let ctx = StreamContext::new(&set, &clf).unwrap();
    assert_eq!(ctx.zero_shot_accuracy(), 0.919);
}

#[test]
fn protocol_zero_shot_accuracy() {
    let (set, clf) = common::generate(&common::protocol_source());
    assert_eq!(zero_shot_hits(&set, &clf), 1369);
    assert_eq!(StreamContext::new(&set, &clf).unwrap().zero_shot_accuracy(), 0.6845);
}

#[test]
fn baseline_fixture_is_saturated_at_default_nu() {
    // the zero-shot prior is sharp enough here that nu = 0.05 never flips a decision
    let (set, clf) = common::generate(&common::baseline_source());
    let ctx = StreamContext::new(&set, &clf).unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    for trace in ctx.run_many(&StreamConfig::for_method(Method::Oga), &seeds).unwrap() {
        assert_eq!(trace.final_accuracy, 0.919);
    }
}

#[test]
fn oga_beats_zero_shot_on_every_seed() {
    let (set, clf) = common::generate(&common::protocol_source());
    let ctx = StreamContext::new(&set, &clf).unwrap();
    let zs_hits = (ctx.zero_shot_accuracy() * 2000.0).round() as usize;
    let seeds: Vec<u64> = (0..100).collect();
    let traces = ctx.run_many(&StreamConfig::for_method(Method::Oga), &seeds).unwrap();
    for t in &traces {
        let hits = t.per_sample_correct.iter().filter(|&&c| c).count();
        // smallest recorded margin over these seeds is 11 samples
        assert!(hits >= zs_hits + 11, "seed {}: {hits} vs {zs_hits}", t.seed);
    }
    let report = oga_core::metrics::summarize(&traces).unwrap();
    assert!((report.mean_accuracy - 0.69395).abs() < 1e-12);
    assert!((report.std_accuracy - 0.0016899883449481565).abs() < 1e-12);
    assert!((report.eta - 0.6911).abs() < 1e-12);
}

#[test]
fn checkpoint_trace_settles() {
    let (set, clf) = common::generate(&common::protocol_source());
    let ctx = StreamContext::new(&set, &clf).unwrap();
    let cfg = StreamConfig {
        checkpoint_every: Some(1),
        ..StreamConfig::for_method(Method::Oga)
    };
    let seeds: Vec<u64> = (0..20).collect();
    for t in ctx.run_many(&cfg, &seeds).unwrap() {
        let acc: Vec<f64> = t.checkpoints.iter().map(|c| c.accuracy).collect();
        assert_eq!(acc.len(), 63);
        let q = acc.len() / 4;
        let range = |w: &[f64]| {
            w.iter().copied().fold(f64::NEG_INFINITY, f64::max) - w.iter().copied().fold(f64::INFINITY, f64::min)
        };
        assert!(
            range(&acc[..q]) > range(&acc[acc.len() - q..]),
            "seed {}: early {} late {}",
            t.seed,
            range(&acc[..q]),
            range(&acc[acc.len() - q..])
        );
    }
}

#[test]
fn larger_nu_dips_further_before_settling() {
    let mut cfg = ExperimentConfig::synthetic(common::protocol_source());
    cfg.methods = vec![Method::Oga];
    cfg.nu_values = vec![0.0, 0.05, 0.25];
    cfg.n_runs = 20;
    cfg.checkpoint_every = Some(1);
    let datasets = cfg.load_datasets().unwrap();
    let report = run_on(&cfg, &datasets).unwrap();

    // average over runs of (final checkpoint - lowest checkpoint)
    let dip = |nu: f64| {
        let cell = report.cells.iter().find(|c| c.cell.nu == Some(nu)).unwrap();
        let total: f64 = cell
            .checkpoints
            .iter()
            .map(|run| {
                let last = run.last().unwrap().accuracy;
                last - run.iter().map(|c| c.accuracy).fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / cell.checkpoints.len() as f64
    };
    assert_eq!(dip(0.0), 0.0);
    let zs = report.zero_shot_accuracy[0].1;
    let flat = report.cells.iter().find(|c| c.cell.nu == Some(0.0)).unwrap();
    assert!(flat.checkpoints.iter().flatten().all(|c| c.accuracy == zs));
    assert!(dip(0.25) > dip(0.05), "{} vs {}", dip(0.25), dip(0.05));
    assert!(dip(0.05) > 0.0);
}

#[test]
fn predict_then_update_differs_only_in_order() {
    let (set, clf) = common::generate(&common::protocol_source());
    let ctx = StreamContext::new(&set, &clf).unwrap();
    let base = StreamConfig::for_method(Method::Oga);
    let late = StreamConfig {
        update_order: oga_core::stream::UpdateOrder::PredictThenUpdate,
        ..base.clone()
    };
    let a = ctx.run(&base).unwrap();
    let b = ctx.run(&late).unwrap();
    assert_eq!(a.cache_mutations, b.cache_mutations);
    assert_eq!(a.refits, b.refits);
    assert_ne!(a.predictions, b.predictions);
}
