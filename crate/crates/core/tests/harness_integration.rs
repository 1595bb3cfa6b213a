mod common;

use std::fs;

use adp_core::harness::{self, DataMode, RateField, SweepConfig};
use adp_core::linops::Matrix;
use adp_core::model::LinearStochasticSystem;
use common::unit_initial;
use nalgebra::dmatrix;

fn two_state(noise: f64) -> LinearStochasticSystem {
    let (f, g) = if noise > 0.0 {
        (vec![dmatrix![noise, 0.0]], vec![dmatrix![noise]])
    } else {
        (Vec::new(), Vec::new())
    };
    LinearStochasticSystem::new(
        dmatrix![0.0, 1.0; -1.0, -0.5],
        dmatrix![0.0; 1.0],
        f,
        g,
        Matrix::identity(2, 2),
        dmatrix![1.0],
    )
}

fn small(h_list: Vec<f64>) -> SweepConfig {
    SweepConfig {
        h_list,
        delta_t: 0.1,
        intervals: 20,
        n_mc: 200,
        n_mc_cap: 200,
        batches: 10,
        max_iter: 6,
        tol: 1e-8,
        cost_paths: 50,
        cost_h: 0.01,
        master_seed: 3,
        ..SweepConfig::default()
    }
}

#[test]
fn exact_mode_error_is_flat_in_h() {
    let sys = two_state(0.0);
    let mut cfg = small(vec![0.05, 0.02, 0.01, 0.005]);
    cfg.data = DataMode::Exact { substeps: 200 };
    let report = harness::run_sweep(&sys, &unit_initial(2), &cfg, serde_json::Value::Null).unwrap();
    for r in &report.records {
        assert!(r.failure.is_none() || r.failure.as_deref().unwrap().starts_with("cost"), "{:?}", r.failure);
        assert!(r.err_p < 1e-8, "h {} err {:.3e}", r.h, r.err_p);
        assert_eq!(r.n_mc, 0);
    }
    let spread = report.records.iter().map(|r| r.err_p).fold(0.0, f64::max);
    assert!(spread < 1e-8);
}

#[test]
fn duplicate_h_values_agree_within_error_bars() {
    let sys = two_state(0.3);
    let cfg = small(vec![0.02, 0.02, 0.02, 0.002]);
    let report = harness::run_sweep(&sys, &unit_initial(2), &cfg, serde_json::Value::Null).unwrap();
    let dups: Vec<_> = report.records.iter().filter(|r| r.h == 0.02).collect();
    assert_eq!(dups.len(), 3);
    let seeds: std::collections::BTreeSet<u64> = dups.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 3);
    for a in &dups {
        for b in &dups {
            let band = 3.0 * (a.mc_stderr.powi(2) + b.mc_stderr.powi(2)).sqrt();
            assert!((a.err_p - b.err_p).abs() <= band, "{} vs {} (band {band:.3e})", a.err_p, b.err_p);
        }
    }
}

#[test]
fn reports_are_reproducible_across_thread_counts() {
    let sys = two_state(0.3);
    let cfg = small(vec![0.02, 0.01, 0.005, 0.002]);
    let dir = std::env::temp_dir().join(format!("adp-core-harness-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let emit = |threads: usize, name: &str| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let report = pool
            .install(|| harness::run_sweep(&sys, &unit_initial(2), &cfg, serde_json::json!({ "case": "repro" })))
            .unwrap();
        let paths = harness::emit_report(&report, &dir.join(name)).unwrap();
        (report, paths.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>())
    };
    let (report, one) = emit(1, "one");
    let (_, three) = emit(3, "three");
    assert_eq!(one, three);

    // CSV parses back to the in-memory rows
    let parsed = harness::read_csv(&one[0][..]).unwrap();
    let expected: Vec<_> = report.records.iter().map(|r| r.csv_row()).collect();
    assert_eq!(parsed, expected);
    for svg in &one[2..] {
        roxmltree::Document::parse(std::str::from_utf8(svg).unwrap()).unwrap();
    }
    let summary: serde_json::Value = serde_json::from_slice(&one[1]).unwrap();
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 4);
    assert_eq!(summary["context"]["case"], "repro");
    assert!(report.fit(RateField::ErrP).is_some());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn rejects_short_or_narrow_grids() {
    let sys = two_state(0.0);
    for bad in [vec![0.02, 0.01, 0.002], vec![0.02, 0.01, 0.005, 0.004]] {
        let err = harness::run_sweep(&sys, &unit_initial(2), &small(bad), serde_json::Value::Null).unwrap_err();
        assert!(err.to_string().contains("h_list"), "{err}");
    }
}
