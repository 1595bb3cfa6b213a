use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adp_core::model::{sensorimotor_arm, ArmParams};
use adp_core::riccati;
use serde_json::{json, Value};

fn adp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adp")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    adp(&args)
}

fn scalar_system(a: f64, g: Option<f64>) -> Value {
    json!({
        "A": [[a]], "B": [[1.0]],
        "G": g.map(|v| vec![vec![vec![v]]]).unwrap_or_default(),
        "Q": [[1.0]], "R": [[1.0]],
        "x0_mean": [0.0], "x0_cov": [[1.0]]
    })
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = walk(dir);
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn solve_scalar_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "system": scalar_system(-1.0, None) }));
    let out = dir.path().join("res/scalar");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = read_json(&dir.path().join("res/scalar_solve.json"));
    let p = v["p_star"][0][0].as_f64().unwrap();
    // P² + 2P − 1 = 0
    assert!((p - (2f64.sqrt() - 1.0)).abs() < 1e-7, "{p}");
    assert!(String::from_utf8_lossy(&o.stdout).contains("0.4142135"));
    assert!(v["version"].as_str().unwrap().starts_with("adp "));
    assert_eq!(v["config"]["system"]["A"][0][0].as_f64(), Some(-1.0));
}

#[test]
fn invalid_r_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut sys = scalar_system(-1.0, None);
    sys["R"] = json!([[-1.0]]);
    let cfg = write_config(dir.path(), "c.json", &json!({ "system": sys }));
    let o = run("solve", &cfg, &dir.path().join("out/x"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("R not positive definite"), "{}", stderr(&o));
    assert_eq!(files_in(dir.path()).len(), 1, "only the config file may exist");
}

#[test]
fn arm_without_noise_matches_lqr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({ "system": { "preset": "sensorimotor-arm", "params": { "c1": 0.0, "c2": 0.0 } } }),
    );
    let o = run("solve", &cfg, &dir.path().join("arm"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = read_json(&dir.path().join("arm_solve.json"));
    let params = ArmParams {
        c1: 0.0,
        c2: 0.0,
        ..ArmParams::default()
    };
    let (sys, _) = sensorimotor_arm(&params).unwrap();
    let x = riccati::care(&sys.a, &sys.b, &sys.q, &sys.r).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let got = v["p_star"][i][j].as_f64().unwrap();
            assert!((got - x[(i, j)]).abs() < 1e-8 * (1.0 + x.norm()), "({i},{j}) {got} vs {}", x[(i, j)]);
        }
    }
}

fn scalar_adp_config() -> Value {
    json!({
        "system": scalar_system(-1.0, Some(0.2)),
        "seed": 5,
        "adp": {
            "h": 0.001, "delta_t": 0.1, "intervals": 30,
            "n_mc": 40, "batches": 4, "max_iter": 12, "tol": 1e-3,
            "explore": { "kind": "sum-of-sinusoids", "amplitudes": [1.0, 0.5, 0.3],
                         "frequencies": [1.3, 3.1, 7.7], "phases": [0.0] }
        }
    })
}

#[test]
fn adp_scalar_converges_near_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &scalar_adp_config());
    let o = run("adp", &cfg, &dir.path().join("s"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = read_json(&dir.path().join("s_adp.json"));
    assert_eq!(v["result"]["converged"], json!(true));
    let p_hat = v["result"]["p_final"][0][0].as_f64().unwrap();
    let p_star = v["reference_p_star"][0][0].as_f64().unwrap();
    // 2aP − P²/(r + g²P) + q = 0 has a closed form only implicitly; the oracle is the solver.
    assert!((p_hat - p_star).abs() < 0.05 * p_star, "{p_hat} vs {p_star}");
    let csv = fs::read_to_string(dir.path().join("s_iterations.csv")).unwrap();
    assert!(csv.starts_with("iteration,relative_change,"));
}

#[test]
fn adp_is_deterministic_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &scalar_adp_config());
    let a = run("adp", &cfg, &dir.path().join("a/run"), &["--threads", "1"]);
    let b = run("adp", &cfg, &dir.path().join("b/run"), &["--threads", "3"]);
    let c = run("adp", &cfg, &dir.path().join("c/run"), &[]);
    for o in [&a, &b, &c] {
        assert_eq!(o.status.code(), Some(0), "{}", stderr(o));
    }
    let csv = |d: &str| fs::read(dir.path().join(d).join("run_iterations.csv")).unwrap();
    assert_eq!(csv("a"), csv("b"));
    assert_eq!(csv("a"), csv("c"));
    // the JSON embeds the output prefix, which differs by construction
    let json = |d: &str| {
        let mut v = read_json(&dir.path().join(d).join("run_adp.json"));
        v["config"]["output"] = Value::Null;
        v
    };
    assert_eq!(json("a"), json("b"));
    assert_eq!(json("a"), json("c"));
    // same prefix twice: byte-identical
    let first = fs::read(dir.path().join("b/run_adp.json")).unwrap();
    let b2 = run("adp", &cfg, &dir.path().join("b/run"), &["--threads", "2"]);
    assert_eq!(b2.status.code(), Some(0));
    assert_eq!(first, fs::read(dir.path().join("b/run_adp.json")).unwrap());
}

#[test]
fn adp_without_convergence_exits_4_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = scalar_adp_config();
    c["adp"]["max_iter"] = json!(1);
    let cfg = write_config(dir.path(), "c.json", &c);
    let o = run("adp", &cfg, &dir.path().join("s"), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(dir.path().join("s_adp.json").exists());
}

#[test]
fn adp_without_excitation_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut sys = scalar_system(-1.0, None);
    sys["x0_cov"] = json!([[0.0]]);
    let c = json!({
        "system": sys,
        "adp": { "h": 0.01, "delta_t": 0.1, "n_mc": 4, "batches": 1, "max_iter": 3,
                 "explore": { "kind": "zero" } }
    });
    let cfg = write_config(dir.path(), "c.json", &c);
    let o = run("adp", &cfg, &dir.path().join("s"), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("persistent excitation"), "{}", stderr(&o));
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let c = json!({
        "system": scalar_system(-1.0, Some(0.1)),
        "simulate": { "duration": 0.5, "h": 0.01, "gain": [[0.5]] }
    });
    let cfg = write_config(dir.path(), "c.json", &c);
    let o = run("simulate", &cfg, &dir.path().join("sim"), &["--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("sim_trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 51);
    assert!(csv.starts_with("t,x1,u1,dwhat1"));
    let v = read_json(&dir.path().join("sim_simulate.json"));
    assert_eq!(v["config"]["seed"], json!(3));
}

#[test]
fn sweep_rejects_h_not_dividing_delta_t() {
    let dir = tempfile::tempdir().unwrap();
    let c = json!({
        "system": { "preset": "sensorimotor-arm" },
        "sweep": { "h_list": [0.04, 0.02, 0.01, 0.003] }
    });
    let cfg = write_config(dir.path(), "c.json", &c);
    let o = run("sweep", &cfg, &dir.path().join("sw"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not divide"), "{}", stderr(&o));
    assert_eq!(files_in(dir.path()).len(), 1);
}

#[test]
fn dry_run_validates_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "system": { "preset": "sensorimotor-arm" } }));
    let o = run("sweep", &cfg, &dir.path().join("sw"), &["--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let plan: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan["command"], json!("sweep"));
    assert_eq!(plan["config"]["sweep"]["h_list"].as_array().unwrap().len(), 6);
    assert_eq!(plan["outputs"].as_array().unwrap().len(), 4);
    assert_eq!(files_in(dir.path()).len(), 1);
}

#[test]
fn unknown_preset_and_bad_json_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "system": { "preset": "pendulum" } }));
    assert_eq!(run("solve", &cfg, &dir.path().join("x"), &[]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run("solve", &bad, &dir.path().join("x"), &[]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(run("solve", &missing, &dir.path().join("x"), &[]).status.code(), Some(2));
}

#[test]
fn small_arm_sweep_reports_six_rows_and_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let c = json!({
        "system": { "preset": "sensorimotor-arm" },
        "sweep": { "n_mc": 24, "n_mc_cap": 24, "batches": 4, "intervals": 60,
                   "cost_paths": 8, "cost_h": 0.01, "master_seed": 9 }
    });
    let cfg = write_config(dir.path(), "c.json", &c);
    let o = run("sweep", &cfg, &dir.path().join("arm"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("fit ErrP: slope"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("arm_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "h,n_mc,iters,err_P_fro,err_K_fro,JE_hat,JE_hat_stderr,JE_exact,seed,wall_time_s");
    assert_eq!(lines.len(), 7);
    for svg in ["arm_sweep_error.svg", "arm_sweep_cost.svg"] {
        let text = fs::read_to_string(dir.path().join(svg)).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    }
    let summary = read_json(&dir.path().join("arm_sweep.json"));
    assert_eq!(summary["context"]["run_config"]["sweep"]["master_seed"], json!(9));
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 6);
}
