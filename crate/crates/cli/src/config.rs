//! Run configuration: one JSON document, validated before any computation.

use std::path::{Path, PathBuf};

use adp_core::adp::{full_unknowns, symmetric_unknowns, AdpConfig, SolveMode};
use adp_core::harness::SweepConfig;
use adp_core::model::{matrix_from_rows, SystemSource};
use adp_core::riccati;
use adp_core::sde::{grid_steps, ExplorationSignal};
use adp_core::{InitialStateSpec, LinearStochasticSystem, Matrix};
use adp_core::model::Rows;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSource,
    #[serde(default)]
    pub seed: u64,
    /// Output path prefix; files get a suffix per artifact.
    #[serde(default = "default_output")]
    pub output: String,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub adp: Option<AdpSection>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_output() -> String {
    "out/run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting gain; the noise-free LQR gain when absent.
    pub initial_gain: Option<Rows>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100,
            initial_gain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Feedback gain; the solver's starting gain when absent.
    pub gain: Option<Rows>,
    pub duration: f64,
    pub h: f64,
    /// No exploration when absent.
    pub explore: Option<ExplorationSignal>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            gain: None,
            duration: 2.0,
            h: 0.001,
            explore: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdpSection {
    pub h: f64,
    pub delta_t: f64,
    pub l_mode: SolveMode,
    /// Number of intervals; twice the unknown count when absent.
    pub intervals: Option<usize>,
    pub n_mc: usize,
    pub batches: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Default multi-sine when absent.
    pub explore: Option<ExplorationSignal>,
}

impl Default for AdpSection {
    fn default() -> Self {
        Self {
            h: 0.005,
            delta_t: 0.2,
            l_mode: SolveMode::LeastSquares,
            intervals: None,
            n_mc: 200,
            batches: 10,
            max_iter: 8,
            tol: 1e-3,
            explore: None,
        }
    }
}

/// Command-line overrides of top-level scalars.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<String>,
    pub n_mc: Option<usize>,
}

/// A validated configuration with every default filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub system: LinearStochasticSystem,
    pub initial: InitialStateSpec,
    pub k0: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Simulate,
    Adp,
    Sweep,
}

impl Resolved {
    pub fn output_prefix(&self) -> PathBuf {
        PathBuf::from(&self.config.output)
    }

    pub fn simulate(&self) -> &SimulateSection {
        self.config.simulate.as_ref().expect("filled by resolve")
    }

    pub fn adp(&self) -> &AdpSection {
        self.config.adp.as_ref().expect("filled by resolve")
    }

    pub fn sweep(&self) -> &SweepConfig {
        self.config.sweep.as_ref().expect("filled by resolve")
    }

    pub fn adp_config(&self) -> AdpConfig {
        let a = self.adp();
        AdpConfig {
            h: a.h,
            delta_t: a.delta_t,
            intervals: a.intervals,
            n_mc: a.n_mc,
            batches: a.batches,
            max_iter: a.max_iter,
            tol: a.tol,
            mode: a.l_mode,
            explore: a.explore.clone().unwrap_or_else(|| ExplorationSignal::default_for(self.system.m(), 1.0)),
            seed: self.config.seed,
        }
    }

    pub fn simulate_gain(&self) -> Result<Matrix, String> {
        match &self.simulate().gain {
            Some(rows) => gain_from_rows(rows, &self.system),
            None => Ok(self.k0.clone()),
        }
    }
}

fn gain_from_rows(rows: &Rows, system: &LinearStochasticSystem) -> Result<Matrix, String> {
    let k = matrix_from_rows(rows, "gain").map_err(|e| e.to_string())?;
    system.check_gain(&k).map_err(|e| e.to_string())?;
    Ok(k)
}

pub fn load(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
}

/// Applies overrides, fills the section needed by `command` and checks
/// every value the command will use.
pub fn resolve(mut config: RunConfig, overrides: &Overrides, command: Command) -> Result<Resolved, String> {
    if let Some(seed) = overrides.seed {
        config.seed = seed;
        if let Some(s) = config.sweep.as_mut() {
            s.master_seed = seed;
        }
    }
    if let Some(out) = &overrides.output {
        config.output = out.clone();
    }
    if config.output.trim().is_empty() {
        return Err("output prefix must not be empty".into());
    }
    let out_path = Path::new(&config.output);
    if out_path.file_name().is_none() {
        return Err(format!("output prefix {} has no file-name part", config.output));
    }
    let (system, initial) = config.system.build().map_err(|e| format!("system: {e}"))?;
    if !(config.solver.tol > 0.0) || config.solver.max_iter == 0 {
        return Err("solver: tol must be > 0 and max_iter >= 1".into());
    }
    let k0 = match &config.solver.initial_gain {
        Some(rows) => {
            let k = gain_from_rows(rows, &system).map_err(|e| format!("solver.initial_gain: {e}"))?;
            let report = adp_core::model::check_admissible(&system, &k).map_err(|e| e.to_string())?;
            if !report.is_stable {
                return Err(format!(
                    "solver.initial_gain is not mean-square admissible (abscissa {:.3e})",
                    report.spectral_abscissa
                ));
            }
            k
        }
        None => riccati::default_initial_gain(&system).map_err(|e| format!("no admissible initial gain: {e}"))?,
    };

    match command {
        Command::Solve => {}
        Command::Simulate => {
            let s = config.simulate.get_or_insert_with(SimulateSection::default);
            grid_steps(s.duration, s.h).map_err(|e| format!("simulate: {e}"))?;
            if let Some(e) = &s.explore {
                e.validate().map_err(|e| format!("simulate.explore: {e}"))?;
            }
            if let Some(rows) = &s.gain {
                gain_from_rows(rows, &system).map_err(|e| format!("simulate.gain: {e}"))?;
            }
        }
        Command::Adp => {
            let a = config.adp.get_or_insert_with(AdpSection::default);
            if let Some(n) = overrides.n_mc {
                a.n_mc = n;
            }
            validate_adp(a, system.n(), system.m())?;
        }
        Command::Sweep => {
            let s = config.sweep.get_or_insert_with(SweepConfig::default);
            if let Some(seed) = overrides.seed {
                s.master_seed = seed;
            }
            if let Some(n) = overrides.n_mc {
                s.n_mc = n;
                s.n_mc_cap = s.n_mc_cap.max(n);
            }
            s.validate().map_err(|e| format!("sweep: {e}"))?;
            let needed = match s.mode {
                SolveMode::Symmetric => symmetric_unknowns(system.n(), system.m()),
                _ => full_unknowns(system.n(), system.m()),
            };
            if s.mode != SolveMode::Square && s.intervals < needed {
                return Err(format!("sweep: intervals = {} is below the {needed} unknowns", s.intervals));
            }
        }
    }
    Ok(Resolved {
        config,
        system,
        initial,
        k0,
    })
}

fn validate_adp(a: &AdpSection, n: usize, m: usize) -> Result<(), String> {
    if !(a.h > 0.0) {
        return Err(format!("adp: h must be positive, got {}", a.h));
    }
    grid_steps(a.delta_t, a.h).map_err(|e| format!("adp: {e}"))?;
    if a.n_mc == 0 || a.max_iter == 0 {
        return Err("adp: n_mc and max_iter must be at least 1".into());
    }
    if !(a.tol >= 0.0) {
        return Err("adp: tol must be non-negative".into());
    }
    if let Some(e) = &a.explore {
        e.validate().map_err(|e| format!("adp.explore: {e}"))?;
    }
    if let Some(l) = a.intervals {
        let needed = match a.l_mode {
            SolveMode::Square => full_unknowns(n, m),
            SolveMode::Symmetric => symmetric_unknowns(n, m),
            SolveMode::LeastSquares => full_unknowns(n, m),
        };
        if a.l_mode == SolveMode::Square && l != needed {
            return Err(format!("adp: square mode needs exactly {needed} intervals, got {l}"));
        }
        if l < needed {
            return Err(format!("adp: {l} intervals are fewer than the {needed} unknowns"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_config() -> RunConfig {
        serde_json::from_str(
            r#"{"system": {"A": [[0.0]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]],
                          "x0_mean": [0.0], "x0_cov": [[1.0]]}}"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let r = resolve(scalar_config(), &Overrides::default(), Command::Adp).unwrap();
        assert_eq!(r.adp().n_mc, AdpSection::default().n_mc);
        assert_eq!(r.config.output, "out/run");
    }

    #[test]
    fn overrides_apply() {
        let ov = Overrides {
            seed: Some(42),
            output: Some("x/y".into()),
            n_mc: Some(7),
        };
        let r = resolve(scalar_config(), &ov, Command::Sweep).unwrap();
        assert_eq!(r.config.seed, 42);
        assert_eq!(r.sweep().master_seed, 42);
        assert_eq!(r.sweep().n_mc, 7);
        assert_eq!(r.config.output, "x/y");
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = scalar_config();
        c.adp = Some(AdpSection {
            h: 0.003,
            ..AdpSection::default()
        });
        let err = resolve(c, &Overrides::default(), Command::Adp).unwrap_err();
        assert!(err.contains("multiple"), "{err}");

        let mut c = scalar_config();
        c.adp = Some(AdpSection {
            l_mode: SolveMode::Square,
            intervals: Some(4),
            ..AdpSection::default()
        });
        assert!(resolve(c, &Overrides::default(), Command::Adp).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"system": {"preset": "sensorimotor-arm"}, "sed": 3}"#;
        assert!(serde_json::from_str::<RunConfig>(text).is_err());
    }
}
