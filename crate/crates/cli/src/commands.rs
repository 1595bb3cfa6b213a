//! Subcommand bodies. Each returns the process exit code.

use std::fs;
use std::path::{Path, PathBuf};

use adp_core::adp::{self, AdpReport};
use adp_core::harness::{self, RateField};
use adp_core::model::{matrix_to_rows, Rows};
use adp_core::riccati;
use adp_core::sde::{self, ExplorationSignal, InitialCondition, SimulationSpec};
use adp_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::config::Resolved;

pub const VERSION: &str = concat!("adp ", env!("CARGO_PKG_VERSION"), " (", "adp-core ", env!("CARGO_PKG_VERSION"), ")");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_NO_CONVERGENCE: i32 = 4;

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn numerical(e: Error) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: e.to_string(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: format!("cannot write {}: {e}", path.display()),
        }
    }
}

type Outcome = Result<i32, Failure>;

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::io(path, e))? + "\n";
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

/// Output files a command will create.
pub fn planned_outputs(resolved: &Resolved, command: crate::config::Command) -> Vec<PathBuf> {
    use crate::config::Command;
    let prefix = resolved.output_prefix();
    match command {
        Command::Solve => vec![with_suffix(&prefix, "_solve.json")],
        Command::Simulate => vec![with_suffix(&prefix, "_trajectory.csv"), with_suffix(&prefix, "_simulate.json")],
        Command::Adp => vec![with_suffix(&prefix, "_adp.json"), with_suffix(&prefix, "_iterations.csv")],
        Command::Sweep => harness::report_paths(&with_suffix(&prefix, "_sweep")).to_vec(),
    }
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    version: &'a str,
    config: &'a crate::config::RunConfig,
    p_star: Rows,
    k_star: Rows,
    iterations: usize,
    final_residual: f64,
}

pub fn solve(r: &Resolved) -> Outcome {
    let s = &r.config.solver;
    let sol = riccati::solve(&r.system, &r.k0, s.tol, s.max_iter).map_err(Failure::numerical)?;
    let out = SolveOutput {
        version: VERSION,
        config: &r.config,
        p_star: matrix_to_rows(&sol.p_star),
        k_star: matrix_to_rows(&sol.k_star),
        iterations: sol.iterations,
        final_residual: sol.final_residual,
    };
    let path = with_suffix(&r.output_prefix(), "_solve.json");
    write_json(&path, &out)?;
    println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
    Ok(EXIT_OK)
}

pub fn simulate(r: &Resolved) -> Outcome {
    let s = r.simulate();
    let gain = r.simulate_gain().map_err(Failure::config)?;
    let spec = SimulationSpec::new(
        gain,
        s.explore.clone().unwrap_or_else(ExplorationSignal::zero),
        InitialCondition::Sampled(r.initial.clone()),
        s.duration,
        s.h,
        r.config.seed,
    );
    let traj = sde::simulate(&r.system, &spec).map_err(Failure::numerical)?;
    let mut csv = Vec::new();
    traj.write_csv(&mut csv).map_err(Failure::numerical)?;
    let csv_path = with_suffix(&r.output_prefix(), "_trajectory.csv");
    write_bytes(&csv_path, &csv)?;
    let last = traj.state(traj.steps()).to_vec();
    let summary = json!({
        "version": VERSION,
        "config": r.config,
        "steps": traj.steps(),
        "final_state": last,
        "diagnostics": traj.diagnostics,
    });
    write_json(&with_suffix(&r.output_prefix(), "_simulate.json"), &summary)?;
    for d in &traj.diagnostics {
        eprintln!("warning: {d}");
    }
    println!("simulated {} steps, wrote {}", traj.steps(), csv_path.display());
    Ok(EXIT_OK)
}

pub fn adp(r: &Resolved) -> Outcome {
    let plant = sde::SimulatedPlant::new(r.system.clone(), r.initial.clone());
    let reference = riccati::solve(&r.system, &r.k0, r.config.solver.tol, r.config.solver.max_iter).ok();
    let config = r.adp_config();
    let result = adp::run_adp(
        &plant,
        &r.k0,
        &r.system.q,
        &r.system.r,
        &config,
        reference.as_ref().map(|s| &s.p_star),
        None,
    )
    .map_err(Failure::numerical)?;

    let out = json!({
        "version": VERSION,
        "config": r.config,
        "reference_p_star": reference.as_ref().map(|s| matrix_to_rows(&s.p_star)),
        "result": AdpReport::from(&result),
    });
    write_json(&with_suffix(&r.output_prefix(), "_adp.json"), &out)?;
    let mut csv = Vec::new();
    result.write_iterations_csv(&mut csv).map_err(Failure::numerical)?;
    write_bytes(&with_suffix(&r.output_prefix(), "_iterations.csv"), &csv)?;

    for it in &result.iterates {
        for w in &it.step.warnings {
            eprintln!("warning (iteration {}): {w}", it.index);
        }
    }
    let last = result.last();
    println!(
        "iterations {} converged {} |P| {:.6e}{}",
        result.iterations_used,
        result.converged,
        result.p_final.norm(),
        last.oracle_error.map(|e| format!(" error to P* {e:.3e}")).unwrap_or_default()
    );
    if result.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("no convergence within {} iterations; results written", config.max_iter);
        Ok(EXIT_NO_CONVERGENCE)
    }
}

pub fn sweep(r: &Resolved) -> Outcome {
    let context = json!({ "tool_version": VERSION, "run_config": r.config });
    let report = harness::run_sweep(&r.system, &r.initial, r.sweep(), context).map_err(Failure::numerical)?;
    let prefix = with_suffix(&r.output_prefix(), "_sweep");
    ensure_parent(&prefix)?;
    let written = harness::emit_report(&report, &prefix).map_err(|e| Failure::io(&prefix, e))?;

    for rec in &report.records {
        match &rec.failure {
            Some(f) => println!("h {:<8} failed: {f}", rec.h),
            None => println!(
                "h {:<8} n_mc {:<6} err_P {:.4e} err_K {:.4e} J_E {:.6}",
                rec.h, rec.n_mc, rec.err_p, rec.err_k, rec.je_exact
            ),
        }
    }
    for field in [RateField::ErrP, RateField::ErrK, RateField::JeExact, RateField::JeHat] {
        if let Some(f) = report.fit(field) {
            println!(
                "fit {:?}: slope {:.4} intercept {:.6} R^2 {:.4} ({} points)",
                field, f.slope, f.intercept, f.r_squared, f.points_used
            );
        }
    }
    for e in &report.fit_errors {
        eprintln!("fit failed: {e}");
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(EXIT_OK)
}
