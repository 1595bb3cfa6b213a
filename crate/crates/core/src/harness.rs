//! Sampling-period sweeps, expected-cost estimation, rate fits and report
//! files.
//!
//! The harness has full model access: it builds the simulated plant, the
//! reference solution `P*`, `K*`, and the cost oracles. Only [`crate::adp`]
//! is restricted to the black-box interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adp::{self, AdpConfig, AdpRunResult, PiSettings, SolveMode};
use crate::error::{Error, Result};
use crate::expectation::ExpectedData;
use crate::linops::{self, Matrix};
use crate::model::{matrix_to_rows, InitialStateSpec, LinearStochasticSystem, Rows};
use crate::plot::{Chart, Scale, Series};
use crate::riccati;
use crate::rng::Philox;
use crate::sde::{self, ExplorationSignal, InitialCondition, SimulationSpec};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Exact CSV header of a sweep.
pub const CSV_HEADER: &str = "h,n_mc,iters,err_P_fro,err_K_fro,JE_hat,JE_hat_stderr,JE_exact,seed,wall_time_s";

/// Number of slowest-mode time constants covered by the cost horizon.
pub const HORIZON_TIME_CONSTANTS: f64 = 8.0;

/// Seed index reserved for the cost Monte Carlo stream.
const COST_STREAM: u64 = 0xC0_57;

const PATH_CHUNK: usize = 64;

/// `J = Tr(P X₀)`.
pub fn expected_cost_exact(p: &Matrix, x0: &Matrix) -> Result<f64> {
    if !p.is_square() || p.shape() != x0.shape() {
        return Err(Error::Dimension {
            context: "expected cost",
            expected: format!("{}x{}", p.nrows(), p.nrows()),
            got: format!("{}x{}", x0.nrows(), x0.ncols()),
        });
    }
    Ok(p.component_mul(x0).sum())
}

/// `HORIZON_TIME_CONSTANTS / |α|` for the mean-square spectral abscissa `α`
/// of `u = −Kx`.
pub fn cost_horizon(system: &LinearStochasticSystem, gain: &Matrix) -> Result<f64> {
    let report = linops::mean_square_stability(system, gain)?;
    if !report.is_stable {
        return Err(Error::NotAdmissible {
            abscissa: report.spectral_abscissa,
        });
    }
    Ok(HORIZON_TIME_CONSTANTS / report.spectral_abscissa.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub paths: usize,
    /// Horizon actually simulated (rounded up to the step grid).
    pub horizon: f64,
    pub h_sim: f64,
}

/// Monte Carlo estimate of `E ∫₀^T (xᵀQx + uᵀRu) dt` under `u = −Kx`,
/// `x₀ ~ N(0, X₀)`, no exploration, left Riemann sum on a grid of `h_sim`.
pub fn expected_cost_mc(
    system: &LinearStochasticSystem,
    gain: &Matrix,
    x0: &Matrix,
    horizon: f64,
    h_sim: f64,
    paths: usize,
    seed: u64,
) -> Result<CostEstimate> {
    system.check_gain(gain)?;
    let report = linops::mean_square_stability(system, gain)?;
    if !report.is_stable {
        return Err(Error::NotAdmissible {
            abscissa: report.spectral_abscissa,
        });
    }
    if !(horizon > 0.0) || !(h_sim > 0.0) || paths < 2 {
        return Err(Error::Invalid("cost estimate needs horizon > 0, h_sim > 0 and at least 2 paths".into()));
    }
    let steps = (horizon / h_sim).ceil().max(1.0);
    let duration = steps * h_sim;
    let init = InitialStateSpec::zero_mean(x0.clone());
    let base = SimulationSpec {
        gain: gain.clone(),
        explore: ExplorationSignal::zero(),
        initial: InitialCondition::Sampled(init),
        t0: 0.0,
        duration,
        h: h_sim,
        seed,
        path: 0,
        substeps: 1,
    };
    let (q, r) = (&system.q, &system.r);
    let one_path = |path: usize| -> Result<f64> {
        let mut spec = base.clone();
        spec.path = path as u64;
        let traj = sde::integrate(system, &spec)?;
        let mut sum = 0.0;
        for j in 0..traj.steps() {
            sum += quad(q, traj.state(j)) + quad(r, traj.input(j));
        }
        Ok(sum * h_sim)
    };

    let (mut s1, mut s2) = (0.0, 0.0);
    let mut start = 0;
    while start < paths {
        let end = (start + PATH_CHUNK).min(paths);
        let chunk: Vec<Result<f64>> = (start..end).into_par_iter().map(one_path).collect();
        for c in chunk {
            let c = c?;
            s1 += c;
            s2 += c * c;
        }
        start = end;
    }
    let n = paths as f64;
    let mean = s1 / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(CostEstimate {
        mean,
        stderr: (var / n).sqrt(),
        paths,
        horizon: duration,
        h_sim,
    })
}

fn quad(m: &Matrix, v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        for k in 0..n {
            s += v[i] * m[(i, k)] * v[k];
        }
    }
    s
}

/// Where each sweep point's data matrices come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataMode {
    /// Euler–Maruyama rollouts through the black-box plant.
    Sampled,
    /// Expectations from the moment equations; `h` has no effect.
    Exact { substeps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub h_list: Vec<f64>,
    pub delta_t: f64,
    pub intervals: usize,
    /// Starting number of rollouts per iteration.
    pub n_mc: usize,
    /// Upper bound for the automatic increase of `n_mc`.
    pub n_mc_cap: usize,
    /// Target ratio of the `P̂` standard error to the observed `err_P`.
    pub stderr_fraction: f64,
    pub batches: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub mode: SolveMode,
    /// `None` selects [`sweep_exploration`].
    pub explore: Option<ExplorationSignal>,
    pub master_seed: u64,
    pub cost_paths: usize,
    pub cost_h: f64,
    /// Store elapsed seconds per point; off keeps outputs byte-reproducible.
    pub record_wall_time: bool,
    pub data: DataMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            h_list: vec![0.04, 0.02, 0.01, 0.005, 0.0025, 0.00125],
            delta_t: 0.2,
            intervals: 300,
            n_mc: 2800,
            n_mc_cap: 11200,
            stderr_fraction: 0.2,
            batches: 20,
            max_iter: 2,
            tol: 1e-6,
            mode: SolveMode::LeastSquares,
            explore: None,
            master_seed: 20_240_601,
            cost_paths: 1000,
            cost_h: 2e-3,
            record_wall_time: false,
            data: DataMode::Sampled,
        }
    }
}

/// Default sweep probing signal: [`ExplorationSignal::default_for`] with
/// unit scale.
pub fn sweep_exploration(m: usize) -> ExplorationSignal {
    ExplorationSignal::default_for(m, 1.0)
}

/// Checks the sweep grid: at least 4 sampling periods spanning at least a
/// decade, each dividing `delta_t`.
pub fn validate_h_list(h_list: &[f64], delta_t: f64) -> Result<()> {
    if h_list.len() < 4 {
        return Err(Error::Invalid(format!("h_list needs at least 4 values, got {}", h_list.len())));
    }
    let lo = h_list.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = h_list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo > 0.0) {
        return Err(Error::Invalid("h_list values must be positive".into()));
    }
    if hi / lo < 10.0 * (1.0 - 1e-12) {
        return Err(Error::Invalid(format!(
            "h_list must span at least one decade, got max/min = {:.3}",
            hi / lo
        )));
    }
    for &h in h_list {
        sde::grid_steps(delta_t, h).map_err(|_| Error::Invalid(format!("h = {h} does not divide delta_t = {delta_t}")))?;
    }
    Ok(())
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        validate_h_list(&self.h_list, self.delta_t)?;
        if self.intervals == 0 || self.max_iter == 0 {
            return Err(Error::Invalid("intervals and max_iter must be positive".into()));
        }
        if let DataMode::Sampled = self.data {
            if self.n_mc == 0 || self.n_mc_cap < self.n_mc {
                return Err(Error::Invalid("need 0 < n_mc <= n_mc_cap".into()));
            }
        }
        if let DataMode::Exact { substeps } = self.data {
            if substeps == 0 {
                return Err(Error::Invalid("exact mode needs substeps >= 1".into()));
            }
        }
        if !(self.stderr_fraction > 0.0) {
            return Err(Error::Invalid("stderr_fraction must be positive".into()));
        }
        if self.cost_paths < 2 || !(self.cost_h > 0.0) {
            return Err(Error::Invalid("cost estimate needs cost_paths >= 2 and cost_h > 0".into()));
        }
        if let Some(e) = &self.explore {
            e.validate()?;
        }
        Ok(())
    }

    pub fn exploration(&self, m: usize) -> ExplorationSignal {
        self.explore.clone().unwrap_or_else(|| sweep_exploration(m))
    }

    /// Seed of the point at position `index` of `h_list`.
    pub fn point_seed(&self, index: usize) -> u64 {
        Philox::new(self.master_seed).derive_seed(index as u64)
    }

    pub fn cost_seed(&self) -> u64 {
        Philox::new(self.master_seed).derive_seed(COST_STREAM << 32)
    }
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub h: f64,
    pub n_mc: usize,
    pub iters: usize,
    pub err_p: f64,
    pub err_k: f64,
    pub je_hat: f64,
    pub je_hat_stderr: f64,
    pub je_exact: f64,
    pub je_exact_stderr: f64,
    /// Frobenius norm of the elementwise standard error of `P̂`.
    pub mc_stderr: f64,
    pub k_stderr: f64,
    pub seed: u64,
    pub wall_time_s: f64,
    pub converged: bool,
    pub failure: Option<String>,
}

/// The CSV columns of a [`SweepRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub h: f64,
    pub n_mc: usize,
    pub iters: usize,
    #[serde(rename = "err_P_fro")]
    pub err_p_fro: f64,
    #[serde(rename = "err_K_fro")]
    pub err_k_fro: f64,
    #[serde(rename = "JE_hat")]
    pub je_hat: f64,
    #[serde(rename = "JE_hat_stderr")]
    pub je_hat_stderr: f64,
    #[serde(rename = "JE_exact")]
    pub je_exact: f64,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl SweepRecord {
    pub fn csv_row(&self) -> CsvRow {
        CsvRow {
            h: self.h,
            n_mc: self.n_mc,
            iters: self.iters,
            err_p_fro: self.err_p,
            err_k_fro: self.err_k,
            je_hat: self.je_hat,
            je_hat_stderr: self.je_hat_stderr,
            je_exact: self.je_exact,
            seed: self.seed,
            wall_time_s: self.wall_time_s,
        }
    }

    fn failed(h: f64, seed: u64, n_mc: usize, reason: String) -> Self {
        Self {
            h,
            n_mc,
            iters: 0,
            err_p: f64::NAN,
            err_k: f64::NAN,
            je_hat: f64::NAN,
            je_hat_stderr: f64::NAN,
            je_exact: f64::NAN,
            je_exact_stderr: f64::NAN,
            mc_stderr: f64::NAN,
            k_stderr: f64::NAN,
            seed,
            wall_time_s: 0.0,
            converged: false,
            failure: Some(reason),
        }
    }
}

/// Model-based reference for a sweep.
#[derive(Debug, Clone)]
pub struct Reference {
    pub p_star: Matrix,
    pub k_star: Matrix,
    pub k0: Matrix,
    /// `E[x₀x₀ᵀ]`.
    pub x0: Matrix,
    pub je_star: f64,
    pub horizon: f64,
}

impl Reference {
    pub fn new(system: &LinearStochasticSystem, initial: &InitialStateSpec) -> Result<Self> {
        let k0 = riccati::default_initial_gain(system)?;
        let sol = riccati::solve(system, &k0, 1e-14, 100)?;
        let x0 = initial.second_moment();
        Ok(Self {
            je_star: expected_cost_exact(&sol.p_star, &x0)?,
            horizon: cost_horizon(system, &sol.k_star)?,
            p_star: sol.p_star,
            k_star: sol.k_star,
            k0,
            x0,
        })
    }
}

/// Number of rollouts after `run` so that its `P̂` standard error is at
/// most `fraction · err_P`, or `None` when no increase is needed or possible.
fn next_budget(n_mc: usize, cap: usize, err_p: f64, stderr: f64, fraction: f64) -> Option<usize> {
    let target = fraction * err_p;
    if !(stderr > target) || n_mc >= cap || !(target > 0.0) {
        return None;
    }
    // stderr scales as N^{-1/2}
    let doublings = ((stderr / target).powi(2).log2().ceil() as u32).max(1);
    Some(n_mc.saturating_mul(1usize << doublings.min(30)).min(cap))
}

fn run_point(
    system: &LinearStochasticSystem,
    initial: &InitialStateSpec,
    reference: &Reference,
    config: &SweepConfig,
    h: f64,
    seed: u64,
    n_mc: usize,
) -> Result<AdpRunResult> {
    let (n, m) = (system.n(), system.m());
    let explore = config.exploration(m);
    match config.data {
        DataMode::Sampled => {
            let plant = sde::SimulatedPlant::new(system.clone(), initial.clone());
            let adp_config = AdpConfig {
                h,
                delta_t: config.delta_t,
                intervals: Some(config.intervals),
                n_mc,
                batches: config.batches,
                max_iter: config.max_iter,
                tol: config.tol,
                mode: config.mode,
                explore,
                seed,
            };
            debug_assert_eq!(adp_config.resolved_intervals(n, m), config.intervals);
            adp::run_adp(&plant, &reference.k0, &system.q, &system.r, &adp_config, Some(&reference.p_star), None)
        }
        DataMode::Exact { substeps } => {
            let source = ExpectedData::new(system.clone(), initial.clone(), explore, config.delta_t, config.intervals, substeps)?;
            let settings = PiSettings {
                max_iter: config.max_iter,
                tol: config.tol,
                mode: config.mode,
            };
            adp::policy_iteration(&source, &reference.k0, &system.q, &system.r, &settings, Some(&reference.p_star), None)
        }
    }
}

fn batch_stderr(values: &[f64]) -> f64 {
    let b = values.len();
    if b < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / b as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

fn sweep_point(
    system: &LinearStochasticSystem,
    initial: &InitialStateSpec,
    reference: &Reference,
    config: &SweepConfig,
    h: f64,
    seed: u64,
) -> SweepRecord {
    let started = Instant::now();
    let mut n_mc = config.n_mc;
    let result = loop {
        match run_point(system, initial, reference, config, h, seed, n_mc) {
            Ok(res) => {
                let last = res.last();
                let err_p = (&res.p_final - &reference.p_star).norm();
                let grow = match config.data {
                    DataMode::Sampled => next_budget(n_mc, config.n_mc_cap, err_p, last.p_stderr, config.stderr_fraction),
                    DataMode::Exact { .. } => None,
                };
                match grow {
                    Some(next) => n_mc = next,
                    None => break Ok(res),
                }
            }
            Err(e) => break Err(e),
        }
    };
    let n_used = match config.data {
        DataMode::Sampled => n_mc,
        DataMode::Exact { .. } => 0,
    };
    let res = match result {
        Ok(res) => res,
        Err(e) => {
            let mut rec = SweepRecord::failed(h, seed, n_used, e.to_string());
            if config.record_wall_time {
                rec.wall_time_s = started.elapsed().as_secs_f64();
            }
            return rec;
        }
    };

    let last = res.last();
    let x0 = &reference.x0;
    let je_exact = expected_cost_exact(&res.p_final, x0).unwrap_or(f64::NAN);
    let batch_je: Vec<f64> = last
        .batch_p_hat
        .iter()
        .filter_map(|p| expected_cost_exact(p, x0).ok())
        .collect();
    let mut failure = None;
    let cost = expected_cost_mc(
        system,
        &res.k_final,
        x0,
        reference.horizon,
        config.cost_h,
        config.cost_paths,
        config.cost_seed(),
    );
    let (je_hat, je_hat_stderr) = match cost {
        Ok(c) => (c.mean, c.stderr),
        Err(e) => {
            failure = Some(format!("cost estimate: {e}"));
            (f64::NAN, f64::NAN)
        }
    };
    SweepRecord {
        h,
        n_mc: n_used,
        iters: res.iterations_used,
        err_p: (&res.p_final - &reference.p_star).norm(),
        err_k: (&res.k_final - &reference.k_star).norm(),
        je_hat,
        je_hat_stderr,
        je_exact,
        je_exact_stderr: batch_stderr(&batch_je),
        mc_stderr: last.p_stderr,
        k_stderr: last.k_stderr,
        seed,
        wall_time_s: if config.record_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        },
        converged: res.converged,
        failure,
    }
}

/// Runs one ADP experiment per entry of `h_list` with seeds derived from
/// the master seed. Per-point failures are recorded in the row. Records are
/// sorted by `h`, largest first.
pub fn sweep_h(
    system: &LinearStochasticSystem,
    initial: &InitialStateSpec,
    reference: &Reference,
    config: &SweepConfig,
) -> Result<Vec<SweepRecord>> {
    config.validate()?;
    let mut records: Vec<SweepRecord> = config
        .h_list
        .par_iter()
        .enumerate()
        .map(|(i, &h)| sweep_point(system, initial, reference, config, h, config.point_seed(i)))
        .collect();
    records.sort_by(|a, b| b.h.total_cmp(&a.h));
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateField {
    ErrP,
    ErrK,
    JeHat,
    JeExact,
}

impl RateField {
    pub fn value(&self, r: &SweepRecord) -> f64 {
        match self {
            RateField::ErrP => r.err_p,
            RateField::ErrK => r.err_k,
            RateField::JeHat => r.je_hat,
            RateField::JeExact => r.je_exact,
        }
    }

    pub fn stderr(&self, r: &SweepRecord) -> f64 {
        match self {
            RateField::ErrP => r.mc_stderr,
            RateField::ErrK => r.k_stderr,
            RateField::JeHat => r.je_hat_stderr,
            RateField::JeExact => r.je_exact_stderr,
        }
    }

    pub fn is_log_log(&self) -> bool {
        matches!(self, RateField::ErrP | RateField::ErrK)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    /// `log y = slope · log h + intercept`.
    LogLog,
    /// `y = slope · h + intercept`.
    Linear,
}

/// Ordinary least-squares line through the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub field: Option<RateField>,
    pub kind: FitKind,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points_used: usize,
    pub slope_stderr: f64,
    /// From the regression residuals.
    pub intercept_stderr: f64,
    /// Per-point standard errors pushed through the intercept estimator;
    /// zero when none were supplied.
    pub intercept_propagated_stderr: f64,
}

impl RateFit {
    /// `√(residual² + propagated²)` for the intercept.
    pub fn intercept_combined_stderr(&self) -> f64 {
        self.intercept_stderr.hypot(self.intercept_propagated_stderr)
    }

    pub fn predict(&self, h: f64) -> f64 {
        match self.kind {
            FitKind::Linear => self.slope * h + self.intercept,
            FitKind::LogLog => (self.intercept + self.slope * h.ln()).exp(),
        }
    }
}

fn ols(xs: &[f64], ys: &[f64], sigmas: Option<&[f64]>, kind: FitKind) -> Result<RateFit> {
    let k = xs.len();
    if k != ys.len() {
        return Err(Error::Dimension {
            context: "fit",
            expected: k.to_string(),
            got: ys.len().to_string(),
        });
    }
    if k < 3 {
        return Err(Error::Invalid(format!("a rate fit needs at least 3 points, got {k}")));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("fit points must be finite".into()));
    }
    let nf = k as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Invalid("fit abscissae must not all coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    let s2 = ss_res / (nf - 2.0);
    let slope_stderr = (s2 / sxx).sqrt();
    let intercept_stderr = (s2 * (1.0 / nf + mx * mx / sxx)).sqrt();
    // intercept = Σ cᵢ yᵢ with cᵢ = 1/k − x̄ (xᵢ − x̄) / Sxx
    let intercept_propagated_stderr = sigmas
        .map(|s| {
            xs.iter()
                .zip(s)
                .map(|(x, si)| {
                    let c = 1.0 / nf - mx * (x - mx) / sxx;
                    (c * si).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .unwrap_or(0.0);
    Ok(RateFit {
        field: None,
        kind,
        slope,
        intercept,
        r_squared,
        points_used: k,
        slope_stderr,
        intercept_stderr,
        intercept_propagated_stderr,
    })
}

/// OLS on `(ln h, ln e)`.
pub fn fit_log_log(h: &[f64], e: &[f64]) -> Result<RateFit> {
    if let Some(bad) = h.iter().chain(e).find(|v| !(**v > 0.0)) {
        return Err(Error::Invalid(format!("log-log fit needs positive values, got {bad}")));
    }
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    ols(&lx, &ly, None, FitKind::LogLog)
}

/// OLS on `(h, y)`; `sigmas` are optional per-point standard errors used
/// only for the propagated intercept error.
pub fn fit_linear(h: &[f64], y: &[f64], sigmas: Option<&[f64]>) -> Result<RateFit> {
    if let Some(s) = sigmas {
        if s.len() != h.len() || s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invalid("per-point standard errors must be finite and non-negative".into()));
        }
    }
    ols(h, y, sigmas, FitKind::Linear)
}

/// Fits `field` over the successful records: log-log for the errors, linear
/// in `h` for the costs.
pub fn fit_rate(records: &[SweepRecord], field: RateField) -> Result<RateFit> {
    let used: Vec<&SweepRecord> = records
        .iter()
        .filter(|r| r.failure.is_none() && field.value(r).is_finite())
        .collect();
    let h: Vec<f64> = used.iter().map(|r| r.h).collect();
    let y: Vec<f64> = used.iter().map(|r| field.value(r)).collect();
    let mut fit = if field.is_log_log() {
        fit_log_log(&h, &y)?
    } else {
        let s: Vec<f64> = used.iter().map(|r| field.stderr(r)).collect();
        let sigmas = s.iter().all(|v| v.is_finite()).then_some(s.as_slice());
        fit_linear(&h, &y, sigmas)?
    };
    fit.field = Some(field);
    Ok(fit)
}

/// JSON view of [`Reference`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub p_star: Rows,
    pub k_star: Rows,
    pub k0: Rows,
    pub x0_second_moment: Rows,
    pub je_star: f64,
    pub cost_horizon: f64,
    pub horizon_time_constants: f64,
}

impl From<&Reference> for ReferenceSummary {
    fn from(r: &Reference) -> Self {
        Self {
            p_star: matrix_to_rows(&r.p_star),
            k_star: matrix_to_rows(&r.k_star),
            k0: matrix_to_rows(&r.k0),
            x0_second_moment: matrix_to_rows(&r.x0),
            je_star: r.je_star,
            cost_horizon: r.horizon,
            horizon_time_constants: HORIZON_TIME_CONSTANTS,
        }
    }
}

/// Everything a sweep produces; serialized as the JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub config: SweepConfig,
    /// Caller-supplied description of the run (e.g. the resolved run config).
    pub context: serde_json::Value,
    pub reference: ReferenceSummary,
    pub seeds: Vec<u64>,
    pub records: Vec<SweepRecord>,
    pub fits: Vec<RateFit>,
    pub fit_errors: Vec<String>,
}

impl SweepReport {
    pub fn fit(&self, field: RateField) -> Option<&RateFit> {
        self.fits.iter().find(|f| f.field == Some(field))
    }
}

/// Reference solution, sweep and all four fits.
pub fn run_sweep(
    system: &LinearStochasticSystem,
    initial: &InitialStateSpec,
    config: &SweepConfig,
    context: serde_json::Value,
) -> Result<SweepReport> {
    config.validate()?;
    let reference = Reference::new(system, initial)?;
    let records = sweep_h(system, initial, &reference, config)?;
    let mut fits = Vec::new();
    let mut fit_errors = Vec::new();
    for field in [RateField::ErrP, RateField::ErrK, RateField::JeExact, RateField::JeHat] {
        match fit_rate(&records, field) {
            Ok(f) => fits.push(f),
            Err(e) => fit_errors.push(format!("{field:?}: {e}")),
        }
    }
    Ok(SweepReport {
        version: VERSION.to_string(),
        config: config.clone(),
        context,
        reference: ReferenceSummary::from(&reference),
        seeds: (0..config.h_list.len()).map(|i| config.point_seed(i)).collect(),
        records,
        fits,
        fit_errors,
    })
}

pub fn write_csv<W: std::io::Write>(records: &[SweepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r.csv_row())?;
    }
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Format(format!("unexpected sweep CSV header {}", header.join(","))));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn fit_line(fit: &RateFit, hs: &[f64], color: &str) -> Series {
    let lo = hs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = hs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let points = (0..=24)
        .map(|i| {
            let t = i as f64 / 24.0;
            let h = match fit.kind {
                FitKind::LogLog => (lo.ln() + t * (hi.ln() - lo.ln())).exp(),
                FitKind::Linear => t * hi,
            };
            (h, fit.predict(h), 0.0)
        })
        .collect();
    Series {
        label: format!("fit: slope {:.3}, R² {:.3}", fit.slope, fit.r_squared),
        color: color.into(),
        points,
        markers: false,
        dashed: true,
    }
}

fn data_series(records: &[SweepRecord], field: RateField, label: &str, color: &str) -> Series {
    Series {
        label: label.into(),
        color: color.into(),
        points: records
            .iter()
            .filter(|r| r.failure.is_none())
            .map(|r| {
                let s = field.stderr(r);
                (r.h, field.value(r), if s.is_finite() { s } else { 0.0 })
            })
            .collect(),
        markers: true,
        dashed: false,
    }
}

/// Error-versus-`h` chart (log-log) with fitted lines.
pub fn error_chart(report: &SweepReport) -> Chart {
    let hs: Vec<f64> = report.records.iter().map(|r| r.h).collect();
    let mut series = vec![
        data_series(&report.records, RateField::ErrP, "‖P̂ − P*‖_F", "#1f77b4"),
        data_series(&report.records, RateField::ErrK, "‖K̂ − K*‖_F", "#ff7f0e"),
    ];
    if let Some(f) = report.fit(RateField::ErrP) {
        series.push(fit_line(f, &hs, "#1f77b4"));
    }
    if let Some(f) = report.fit(RateField::ErrK) {
        series.push(fit_line(f, &hs, "#ff7f0e"));
    }
    Chart {
        title: "Policy iteration error versus sampling period".into(),
        x_label: "sampling period h".into(),
        y_label: "Frobenius error".into(),
        x_scale: Scale::Log10,
        y_scale: Scale::Log10,
        series,
    }
}

/// Expected-cost-versus-`h` chart (linear) with the fitted line and `J*`.
pub fn cost_chart(report: &SweepReport) -> Chart {
    let hs: Vec<f64> = report.records.iter().map(|r| r.h).collect();
    let hi = hs.iter().copied().fold(0.0, f64::max);
    let mut series = vec![data_series(&report.records, RateField::JeExact, "Tr(P̂ X₀)", "#2ca02c")];
    if let Some(f) = report.fit(RateField::JeExact) {
        series.push(fit_line(f, &hs, "#2ca02c"));
    }
    series.push(Series {
        label: format!("optimal cost {:.5}", report.reference.je_star),
        color: "#7f7f7f".into(),
        points: vec![(0.0, report.reference.je_star, 0.0), (hi, report.reference.je_star, 0.0)],
        markers: false,
        dashed: false,
    });
    Chart {
        title: "Expected cost versus sampling period".into(),
        x_label: "sampling period h".into(),
        y_label: "expected cost".into(),
        x_scale: Scale::Linear,
        y_scale: Scale::Linear,
        series,
    }
}

/// Output paths for `prefix`: CSV, JSON, error SVG, cost SVG.
pub fn report_paths(prefix: &Path) -> [PathBuf; 4] {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    [with(".csv"), with(".json"), with("_error.svg"), with("_cost.svg")]
}

/// Writes the CSV, JSON summary and both charts next to `prefix`.
pub fn emit_report(report: &SweepReport, prefix: &Path) -> Result<Vec<PathBuf>> {
    if report.records.is_empty() {
        return Err(Error::Invalid("no sweep records to report".into()));
    }
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let [csv_path, json_path, err_svg, cost_svg] = report_paths(prefix);
    let mut csv_buf = Vec::new();
    write_csv(&report.records, &mut csv_buf)?;
    fs::write(&csv_path, csv_buf)?;
    fs::write(&json_path, serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(&err_svg, error_chart(report).render())?;
    fs::write(&cost_svg, cost_chart(report).render())?;
    Ok(vec![csv_path, json_path, err_svg, cost_svg])
}

/// Settings of the quadrature self-refinement check.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementConfig {
    /// Coarsest sampling period; level `i` uses `base_h / 2ⁱ`.
    pub base_h: f64,
    pub levels: usize,
    /// The reference runs at `base_h / ref_factor`.
    pub ref_factor: u32,
    pub delta_t: f64,
    pub intervals: usize,
    pub paths: usize,
    pub seed: u64,
    pub explore: ExplorationSignal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementLevel {
    pub h: f64,
    /// `‖E[I_xx(h)] − E[I_xx(h_ref)]‖_F` over all rows and entries.
    pub mean_difference: f64,
    /// Frobenius norm of the elementwise standard error of that difference.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementStudy {
    pub levels: Vec<RefinementLevel>,
    pub fit: RateFit,
}

/// Compares `I_xx` built at each level against the reference built on the
/// same Brownian paths and fits the log-log slope of the mean difference.
pub fn quadrature_refinement_study(
    system: &LinearStochasticSystem,
    initial: &InitialStateSpec,
    gain: &Matrix,
    config: &RefinementConfig,
) -> Result<RefinementStudy> {
    let levels = config.levels;
    if levels < 3 || config.paths < 2 {
        return Err(Error::Invalid("refinement needs at least 3 levels and 2 paths".into()));
    }
    let finest_factor = 1u32 << (levels - 1);
    if config.ref_factor % finest_factor != 0 || config.ref_factor <= finest_factor {
        return Err(Error::Invalid("ref_factor must be a multiple of 2^(levels-1) and finer than the last level".into()));
    }
    let h_ref = config.base_h / config.ref_factor as f64;
    let hs: Vec<f64> = (0..levels).map(|i| config.base_h / (1u32 << i) as f64).collect();
    let steps = sde::grid_steps(config.delta_t, config.base_h)?;
    let intervals: Vec<(f64, f64)> = (0..config.intervals)
        .map(|i| (i as f64 * config.delta_t, (i + 1) as f64 * config.delta_t))
        .collect();
    let duration = config.intervals as f64 * config.delta_t;
    debug_assert!(steps > 0);

    let spec_for = |h: f64, substeps: u32, path: usize| SimulationSpec {
        gain: gain.clone(),
        explore: config.explore.clone(),
        initial: InitialCondition::Sampled(initial.clone()),
        t0: 0.0,
        duration,
        h,
        seed: config.seed,
        path: path as u64,
        substeps,
    };
    // Per path: I_xx(h_i) − I_xx(h_ref) for every level.
    let one_path = |path: usize| -> Result<Vec<Matrix>> {
        let fine = sde::integrate(system, &spec_for(h_ref, 1, path))?;
        let reference = adp::build_data_matrices(&fine, &intervals, gain)?.i_xx;
        hs.iter()
            .enumerate()
            .map(|(i, &h)| {
                let substeps = config.ref_factor >> i;
                let traj = sde::integrate(system, &spec_for(h, substeps, path))?;
                Ok(adp::build_data_matrices(&traj, &intervals, gain)?.i_xx - &reference)
            })
            .collect()
    };

    let shape = (config.intervals, system.n() * system.n());
    let mut s1 = vec![Matrix::zeros(shape.0, shape.1); levels];
    let mut s2 = s1.clone();
    let mut start = 0;
    while start < config.paths {
        let end = (start + PATH_CHUNK).min(config.paths);
        let chunk: Vec<Result<Vec<Matrix>>> = (start..end).into_par_iter().map(one_path).collect();
        for diffs in chunk {
            for (i, d) in diffs?.into_iter().enumerate() {
                s2[i] += d.component_mul(&d);
                s1[i] += d;
            }
        }
        start = end;
    }
    let n = config.paths as f64;
    let out: Vec<RefinementLevel> = hs
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let mean = &s1[i] / n;
            let var = (&s2[i] / n - mean.component_mul(&mean)) * (n / (n - 1.0));
            RefinementLevel {
                h,
                mean_difference: mean.norm(),
                stderr: (var.map(|v| v.max(0.0)).sum() / n).sqrt(),
            }
        })
        .collect();
    let fit = fit_log_log(&hs, &out.iter().map(|l| l.mean_difference).collect::<Vec<_>>())?;
    Ok(RefinementStudy { levels: out, fit })
}
