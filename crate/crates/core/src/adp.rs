//! Data-driven policy iteration.
//!
//! Each step evaluates the current gain `K_k` from trajectory data only:
//! over `l` intervals the identity
//!
//! ```text
//! x⊗x|ᵗ¹ₜ₀ vec(P) − 2∫x⊗dŵ vec(BᵀP) + (∫x⊗x (Kᵀ⊗Kᵀ) − ∫u⊗u) vec(Σ_P)
//!     = −∫x⊗x vec(Q + KᵀRK)
//! ```
//!
//! is stacked into `Θ s = Ξ`, with the integrals replaced by left-endpoint
//! sums on the sampling grid, averaged over independent runs, and solved for
//! `s = [vec(P); vec(BᵀP); vec(Σ_P)]`. The next gain is `(Σ̂ + R)⁻¹ BᵀP̂`,
//! so the loop needs neither `B` nor any other plant matrix. The plant is
//! reachable only through [`Environment`].

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{self, Matrix, Vector};
use crate::model::{matrix_to_rows, Rows};
use crate::rng::Philox;
use crate::sde::{grid_steps, ExplorationSignal, Trajectory};

/// Condition estimates above this produce a warning on the step.
pub const CONDITION_WARNING: f64 = 1e8;
/// Relative singular-value floor used for rank decisions.
const RANK_TOL: f64 = 1e-11;
/// Policy iteration aborts when `‖P̂_k‖_F` exceeds this.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Runs simulated concurrently before their blocks are folded in.
const CHUNK: usize = 64;

/// What the learner may ask of the plant: run a policy, get samples back.
pub trait Environment: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn rollout(&self, request: &RolloutRequest<'_>) -> Result<Trajectory>;
}

/// One closed-loop experiment `u = −Kx + e(t)` on the grid `jh`.
#[derive(Debug, Clone, Copy)]
pub struct RolloutRequest<'a> {
    pub gain: &'a Matrix,
    pub explore: &'a ExplorationSignal,
    pub duration: f64,
    pub h: f64,
    pub seed: u64,
    pub path: u64,
}

/// The four integral blocks over `l` intervals, one row per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    /// `l × n²`, `x⊗x` at interval end minus start.
    pub delta_xx: Matrix,
    /// `l × n²`.
    pub i_xx: Matrix,
    /// `l × m²`.
    pub i_uu: Matrix,
    /// `l × nm`, `Σ_j x(t_j) ⊗ Δŵ(t_j)`.
    pub i_xw: Matrix,
    pub interval_bounds: Vec<(f64, f64)>,
    pub h: f64,
}

impl DataMatrices {
    pub fn zeros(l: usize, n: usize, m: usize, h: f64) -> Self {
        Self {
            delta_xx: Matrix::zeros(l, n * n),
            i_xx: Matrix::zeros(l, n * n),
            i_uu: Matrix::zeros(l, m * m),
            i_xw: Matrix::zeros(l, n * m),
            interval_bounds: Vec::with_capacity(l),
            h,
        }
    }

    pub fn rows(&self) -> usize {
        self.delta_xx.nrows()
    }

    pub fn state_dim(&self) -> usize {
        (self.delta_xx.ncols() as f64).sqrt().round() as usize
    }

    pub fn input_dim(&self) -> usize {
        (self.i_uu.ncols() as f64).sqrt().round() as usize
    }

    fn add_assign(&mut self, other: &DataMatrices) {
        self.delta_xx += &other.delta_xx;
        self.i_xx += &other.i_xx;
        self.i_uu += &other.i_uu;
        self.i_xw += &other.i_xw;
    }

    fn scale(&mut self, factor: f64) {
        self.delta_xx *= factor;
        self.i_xx *= factor;
        self.i_uu *= factor;
        self.i_xw *= factor;
    }
}

fn grid_index(t: f64, traj: &Trajectory) -> Result<usize> {
    let pos = (t - traj.t0) / traj.h;
    let idx = pos.round();
    if idx < 0.0 || (pos - idx).abs() > 1e-7 || idx as usize > traj.steps() {
        return Err(Error::Invalid(format!(
            "interval bound {t} is not on the trajectory grid (t0 = {}, h = {}, {} steps)",
            traj.t0,
            traj.h,
            traj.steps()
        )));
    }
    Ok(idx as usize)
}

/// Builds the integral blocks of `traj` over `intervals`.
///
/// `δ_xx` uses exact endpoint samples; `I_xx`, `I_uu` are left-endpoint sums
/// with weight `h`; `I_xŵ` pairs each left-endpoint state with the recorded
/// increment over the following step (Itô). `gain` is checked against the
/// recorded inputs at every interval start.
pub fn build_data_matrices(traj: &Trajectory, intervals: &[(f64, f64)], gain: &Matrix) -> Result<DataMatrices> {
    let (n, m) = (traj.n, traj.m);
    if gain.shape() != (m, n) {
        return Err(Error::Dimension {
            context: "build_data_matrices gain",
            expected: format!("{m}x{n}"),
            got: format!("{}x{}", gain.nrows(), gain.ncols()),
        });
    }
    if traj.dw_hat.len() != traj.inputs.len() {
        return Err(Error::Invalid("trajectory is missing dŵ increments".into()));
    }
    let mut dm = DataMatrices::zeros(intervals.len(), n, m, traj.h);
    let h = traj.h;
    // Upper triangles are accumulated packed and mirrored once per row.
    let mut xx = vec![0.0; n * (n + 1) / 2];
    let mut uu = vec![0.0; m * (m + 1) / 2];
    let mut xw = vec![0.0; n * m];

    for (row, &(start, end)) in intervals.iter().enumerate() {
        let j0 = grid_index(start, traj)?;
        let j1 = grid_index(end, traj)?;
        if j1 <= j0 {
            return Err(Error::Invalid(format!("empty or reversed interval [{start}, {end}]")));
        }
        check_policy(traj, j0, gain)?;

        let (x0, x1) = (traj.state(j0), traj.state(j1));
        for i in 0..n {
            for k in 0..n {
                dm.delta_xx[(row, i * n + k)] = x1[i] * x1[k] - x0[i] * x0[k];
            }
        }

        xx.iter_mut().for_each(|v| *v = 0.0);
        uu.iter_mut().for_each(|v| *v = 0.0);
        xw.iter_mut().for_each(|v| *v = 0.0);
        let states = traj.states[j0 * n..j1 * n].chunks_exact(n);
        let inputs = traj.inputs[j0 * m..j1 * m].chunks_exact(m);
        let incs = traj.dw_hat[j0 * m..j1 * m].chunks_exact(m);
        for ((x, u), w) in states.zip(inputs).zip(incs) {
            let mut acc = xx.iter_mut();
            for (i, xi) in x.iter().enumerate() {
                // the slice leads so the zip stops without consuming `acc`
                for (xk, a) in x[i..].iter().zip(acc.by_ref()) {
                    *a += xi * xk;
                }
            }
            for (out, xi) in xw.chunks_exact_mut(m).zip(x) {
                for (o, wr) in out.iter_mut().zip(w) {
                    *o += xi * wr;
                }
            }
            let mut acc = uu.iter_mut();
            for (a, ua) in u.iter().enumerate() {
                for (ub, o) in u[a..].iter().zip(acc.by_ref()) {
                    *o += ua * ub;
                }
            }
        }
        let mut idx = 0;
        for i in 0..n {
            for k in i..n {
                let v = xx[idx] * h;
                dm.i_xx[(row, i * n + k)] = v;
                dm.i_xx[(row, k * n + i)] = v;
                idx += 1;
            }
            for r in 0..m {
                dm.i_xw[(row, i * m + r)] = xw[i * m + r];
            }
        }
        let mut idx = 0;
        for a in 0..m {
            for b in a..m {
                let v = uu[idx] * h;
                dm.i_uu[(row, a * m + b)] = v;
                dm.i_uu[(row, b * m + a)] = v;
                idx += 1;
            }
        }
        dm.interval_bounds.push((traj.time(j0), traj.time(j1)));
    }
    Ok(dm)
}

fn check_policy(traj: &Trajectory, j: usize, gain: &Matrix) -> Result<()> {
    if j >= traj.steps() {
        return Ok(());
    }
    let (x, u, e) = (traj.state(j), traj.input(j), traj.exploration(j));
    for r in 0..traj.m {
        let mut expected = e[r];
        for c in 0..traj.n {
            expected -= gain[(r, c)] * x[c];
        }
        if (expected - u[r]).abs() > 1e-9 * (1.0 + u[r].abs()) {
            return Err(Error::Invalid(format!(
                "recorded input at step {j} was not generated by the supplied gain"
            )));
        }
    }
    Ok(())
}

/// `Θ = [δ_xx, −2 I_xŵ, I_xx(Kᵀ⊗Kᵀ) − I_uu]`, `Ξ = −I_xx vec(Q + KᵀRK)`.
pub fn assemble_theta_xi(dm: &DataMatrices, gain: &Matrix, q: &Matrix, r: &Matrix) -> Result<(Matrix, Vector)> {
    let (n, m) = (dm.state_dim(), dm.input_dim());
    if gain.shape() != (m, n) || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension {
            context: "assemble_theta_xi",
            expected: format!("K {m}x{n}, Q {n}x{n}, R {m}x{m}"),
            got: format!(
                "K {}x{}, Q {}x{}, R {}x{}",
                gain.nrows(),
                gain.ncols(),
                q.nrows(),
                q.ncols(),
                r.nrows(),
                r.ncols()
            ),
        });
    }
    let l = dm.rows();
    let (p_len, bp_len) = (n * n, n * m);
    let mut theta = Matrix::zeros(l, p_len + bp_len + m * m);
    theta.columns_mut(0, p_len).copy_from(&dm.delta_xx);
    theta.columns_mut(p_len, bp_len).copy_from(&(&dm.i_xw * -2.0));
    let kt = gain.transpose();
    let kk = linops::kron(&kt, &kt);
    theta
        .columns_mut(p_len + bp_len, m * m)
        .copy_from(&(&dm.i_xx * kk - &dm.i_uu));
    let cost = q + gain.transpose() * r * gain;
    let xi = -(&dm.i_xx * linops::vec(&cost));
    Ok((theta, xi))
}

/// Elementwise mean of `(Θ, Ξ)` pairs, summed in index order.
pub fn average_over_runs(runs: &[(Matrix, Vector)]) -> Result<(Matrix, Vector)> {
    let (first, rest) = runs
        .split_first()
        .ok_or_else(|| Error::Invalid("average_over_runs needs at least one run".into()))?;
    let mut theta = first.0.clone();
    let mut xi = first.1.clone();
    for (t, x) in rest {
        if t.shape() != theta.shape() || x.len() != xi.len() {
            return Err(Error::Dimension {
                context: "average_over_runs",
                expected: format!("{}x{}", theta.nrows(), theta.ncols()),
                got: format!("{}x{}", t.nrows(), t.ncols()),
            });
        }
        theta += t;
        xi += x;
    }
    let inv = 1.0 / runs.len() as f64;
    Ok((theta * inv, xi * inv))
}

/// How the stacked system is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    /// `l = n² + nm + m²` rows, direct solve of the full stacked vector.
    /// Symmetric duplicate columns make this singular unless `n = m = 1`.
    Square,
    /// Only upper-triangular entries of `P` and `Σ` are unknowns.
    Symmetric,
    /// Minimum-norm least squares on the full stacked vector.
    #[default]
    LeastSquares,
}

impl fmt::Display for SolveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveMode::Square => "square",
            SolveMode::Symmetric => "symmetric",
            SolveMode::LeastSquares => "least-squares",
        })
    }
}

/// `n² + nm + m²`, the length of the stacked unknown.
pub fn full_unknowns(n: usize, m: usize) -> usize {
    n * n + n * m + m * m
}

/// `n(n+1)/2 + nm + m(m+1)/2`, the independent unknowns.
pub fn symmetric_unknowns(n: usize, m: usize) -> usize {
    n * (n + 1) / 2 + n * m + m * (m + 1) / 2
}

/// Result of one data-driven evaluation step.
#[derive(Debug, Clone, PartialEq)]
pub struct PiStepSolution {
    /// `[vec(P̂); vec(BᵀP̂); vec(Σ̂)]`.
    pub s_hat: Vector,
    pub p_hat: Matrix,
    pub btp_hat: Matrix,
    pub sigma_hat: Matrix,
    pub condition_estimate: f64,
    pub rank: usize,
    pub k_next: Matrix,
    pub warnings: Vec<String>,
}

/// Column map from the symmetric parameterization to the full stack.
fn symmetric_expansion(n: usize, m: usize) -> Matrix {
    let full = full_unknowns(n, m);
    let reduced = symmetric_unknowns(n, m);
    let mut map = Matrix::zeros(full, reduced);
    let mut col = 0;
    let block = |offset: usize, dim: usize, map: &mut Matrix, col: &mut usize| {
        for j in 0..dim {
            for i in 0..=j {
                map[(offset + i + dim * j, *col)] = 1.0;
                map[(offset + j + dim * i, *col)] = 1.0;
                *col += 1;
            }
        }
    };
    block(0, n, &mut map, &mut col);
    for k in 0..n * m {
        map[(n * n + k, col)] = 1.0;
        col += 1;
    }
    block(n * n + n * m, m, &mut map, &mut col);
    map
}

/// Solves `Θ̄ ŝ = Ξ̄` and applies the improvement `K = (Σ̂ + R)⁻¹ BᵀP̂`.
pub fn solve_pi_step(theta: &Matrix, xi: &Vector, n: usize, m: usize, r: &Matrix, mode: SolveMode) -> Result<PiStepSolution> {
    let full = full_unknowns(n, m);
    if theta.ncols() != full || theta.nrows() != xi.len() {
        return Err(Error::Dimension {
            context: "solve_pi_step",
            expected: format!("Theta with {full} columns and matching Xi"),
            got: format!("Theta {}x{}, Xi {}", theta.nrows(), theta.ncols(), xi.len()),
        });
    }
    if r.shape() != (m, m) {
        return Err(Error::Dimension {
            context: "solve_pi_step R",
            expected: format!("{m}x{m}"),
            got: format!("{}x{}", r.nrows(), r.ncols()),
        });
    }
    if theta.iter().chain(xi.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("data matrices contain non-finite entries".into()));
    }
    let l = theta.nrows();

    let (s_hat, condition, rank) = match mode {
        SolveMode::Square => {
            if l != full {
                return Err(Error::Invalid(format!("square mode needs exactly {full} intervals, got {l}")));
            }
            let sv = theta.singular_values();
            let (max, min) = (sv.max(), sv.min());
            let rank = sv.iter().filter(|s| **s > RANK_TOL * max).count();
            if rank < full {
                return Err(Error::RankDeficient { rank, required: full });
            }
            let s = theta
                .clone()
                .lu()
                .solve(xi)
                .ok_or(Error::RankDeficient { rank, required: full })?;
            (s, max / min, rank)
        }
        SolveMode::Symmetric => {
            let expand = symmetric_expansion(n, m);
            let reduced = theta * &expand;
            let required = reduced.ncols();
            if l < required {
                return Err(Error::RankDeficient { rank: l, required });
            }
            let svd = reduced.svd(true, true);
            let max = svd.singular_values.max();
            let min = svd.singular_values.min();
            let rank = svd.singular_values.iter().filter(|s| **s > RANK_TOL * max).count();
            if rank < required {
                return Err(Error::RankDeficient { rank, required });
            }
            let z = svd
                .solve(xi, 0.0)
                .map_err(|e| Error::Invalid(format!("least-squares solve failed: {e}")))?;
            (expand * z, max / min, rank)
        }
        SolveMode::LeastSquares => {
            let required = symmetric_unknowns(n, m);
            if l < required {
                return Err(Error::RankDeficient { rank: l, required });
            }
            let svd = theta.clone().svd(true, true);
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
            let max = svd.singular_values[order[0]];
            let rank = svd.singular_values.iter().filter(|s| **s > RANK_TOL * max).count();
            if rank < required {
                return Err(Error::RankDeficient { rank, required });
            }
            // Pseudo-inverse truncated to the independent-unknown count.
            let cutoff = svd.singular_values[order[required - 1]];
            let u = svd.u.as_ref().expect("u requested");
            let v_t = svd.v_t.as_ref().expect("v_t requested");
            let mut s = Vector::zeros(full);
            for &k in &order[..required] {
                let coef = u.column(k).dot(xi) / svd.singular_values[k];
                s += v_t.row(k).transpose() * coef;
            }
            (s, max / cutoff, rank)
        }
    };

    let mut p_hat = linops::unvec(&s_hat.rows(0, n * n).into_owned(), n, n)?;
    linops::symmetrize_mut(&mut p_hat);
    let btp_hat = linops::unvec(&s_hat.rows(n * n, n * m).into_owned(), m, n)?;
    let mut sigma_hat = linops::unvec(&s_hat.rows(n * n + n * m, m * m).into_owned(), m, m)?;
    linops::symmetrize_mut(&mut sigma_hat);

    let weighted = &sigma_hat + r;
    let weighted_cond = linops::condition_number(&weighted);
    let inv = weighted.try_inverse().filter(|_| weighted_cond < 1e14).ok_or(Error::Singular {
        context: "identified Sigma + R",
        condition: weighted_cond,
    })?;
    let k_next = inv * &btp_hat;

    let mut warnings = Vec::new();
    if condition > CONDITION_WARNING {
        warnings.push(format!("data matrix condition estimate {condition:.3e} exceeds {CONDITION_WARNING:.0e}"));
    }
    Ok(PiStepSolution {
        s_hat,
        p_hat,
        btp_hat,
        sigma_hat,
        condition_estimate: condition,
        rank,
        k_next,
        warnings,
    })
}

/// Averaged data for one policy-evaluation step, plus per-batch means used
/// for Monte Carlo error bars.
#[derive(Debug, Clone)]
pub struct CollectedData {
    pub mean: DataMatrices,
    pub batch_means: Vec<DataMatrices>,
    pub runs: usize,
}

/// Supplier of averaged data matrices for policy `gain` at iteration `k`.
pub trait DataSource: Sync {
    fn collect(&self, iteration: usize, gain: &Matrix) -> Result<CollectedData>;
    fn budget(&self) -> DataBudget;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataBudget {
    pub intervals: usize,
    pub n_mc: usize,
    pub h: f64,
    pub delta_t: f64,
}

/// Settings of the sampled data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub h: f64,
    pub delta_t: f64,
    pub intervals: usize,
    pub n_mc: usize,
    /// Number of contiguous run batches for error bars (≥ 2 to get any).
    pub batches: usize,
    pub explore: ExplorationSignal,
    pub seed: u64,
}

/// `n_mc` independent rollouts per iteration, each one long trajectory cut
/// into `intervals` contiguous windows of length `delta_t`.
pub struct SampledData<'a, E: Environment> {
    env: &'a E,
    config: SamplingConfig,
}

impl<'a, E: Environment> SampledData<'a, E> {
    pub fn new(env: &'a E, config: SamplingConfig) -> Result<Self> {
        config.explore.validate()?;
        let per_interval = grid_steps(config.delta_t, config.h)?;
        if per_interval == 0 || config.intervals == 0 || config.n_mc == 0 {
            return Err(Error::Invalid("need at least one interval, one step per interval and one run".into()));
        }
        Ok(Self { env, config })
    }

    fn intervals(&self) -> Vec<(f64, f64)> {
        let steps = (self.config.delta_t / self.config.h).round() as usize;
        (0..self.config.intervals)
            .map(|i| {
                let a = (i * steps) as f64 * self.config.h;
                let b = ((i + 1) * steps) as f64 * self.config.h;
                (a, b)
            })
            .collect()
    }
}

impl<E: Environment> DataSource for SampledData<'_, E> {
    fn collect(&self, iteration: usize, gain: &Matrix) -> Result<CollectedData> {
        let cfg = &self.config;
        let (n, m) = (self.env.state_dim(), self.env.input_dim());
        let seed = Philox::new(cfg.seed).derive_seed(iteration as u64);
        let intervals = self.intervals();
        let duration = intervals.last().map_or(0.0, |iv| iv.1);
        let batches = cfg.batches.clamp(1, cfg.n_mc);

        let one_run = |path: usize| -> Result<DataMatrices> {
            let request = RolloutRequest {
                gain,
                explore: &cfg.explore,
                duration,
                h: cfg.h,
                seed,
                path: path as u64,
            };
            let traj = self.env.rollout(&request)?;
            build_data_matrices(&traj, &intervals, gain)
        };

        let mut batch_sums: Vec<DataMatrices> =
            (0..batches).map(|_| DataMatrices::zeros(intervals.len(), n, m, cfg.h)).collect();
        let mut batch_counts = vec![0usize; batches];
        let mut start = 0;
        while start < cfg.n_mc {
            let end = (start + CHUNK).min(cfg.n_mc);
            let chunk: Vec<Result<DataMatrices>> = (start..end).into_par_iter().map(one_run).collect();
            for (offset, dm) in chunk.into_iter().enumerate() {
                let path = start + offset;
                let b = path * batches / cfg.n_mc;
                batch_sums[b].add_assign(&dm?);
                batch_counts[b] += 1;
            }
            start = end;
        }

        let mut mean = DataMatrices::zeros(intervals.len(), n, m, cfg.h);
        for sum in &batch_sums {
            mean.add_assign(sum);
        }
        mean.scale(1.0 / cfg.n_mc as f64);
        mean.interval_bounds = intervals.clone();
        for (sum, count) in batch_sums.iter_mut().zip(&batch_counts) {
            sum.scale(1.0 / *count as f64);
            sum.interval_bounds = intervals.clone();
        }
        Ok(CollectedData {
            mean,
            batch_means: if batches >= 2 { batch_sums } else { Vec::new() },
            runs: cfg.n_mc,
        })
    }

    fn budget(&self) -> DataBudget {
        DataBudget {
            intervals: self.config.intervals,
            n_mc: self.config.n_mc,
            h: self.config.h,
            delta_t: self.config.delta_t,
        }
    }
}

/// Loop controls independent of where the data come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub mode: SolveMode,
}

/// One data-driven iterate: the evaluated gain, the solution, and error bars.
#[derive(Debug, Clone, PartialEq)]
pub struct AdpIterate {
    pub index: usize,
    pub gain: Matrix,
    pub step: PiStepSolution,
    /// `‖P̂_k − P̂_{k−1}‖_F / (1 + ‖P̂_{k−1}‖_F)`; infinite for the first.
    pub relative_change: f64,
    /// Per-batch `P̂` estimates (empty without batches).
    pub batch_p_hat: Vec<Matrix>,
    pub batch_k_next: Vec<Matrix>,
    /// Frobenius norm of the elementwise standard error of `P̂`.
    pub p_stderr: f64,
    pub k_stderr: f64,
    /// `‖P̂_k − P_ref‖_F` when a reference was supplied.
    pub oracle_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdpRunResult {
    pub iterates: Vec<AdpIterate>,
    pub p_final: Matrix,
    pub k_final: Matrix,
    pub converged: bool,
    pub iterations_used: usize,
    pub budget: DataBudget,
}

impl AdpRunResult {
    pub fn last(&self) -> &AdpIterate {
        self.iterates.last().expect("at least one iterate")
    }
}

/// Hook invoked after every iterate; returning an error stops the loop.
pub type Observer<'a> = dyn FnMut(&AdpIterate) -> Result<()> + 'a;

fn stderr_frobenius(samples: &[Matrix]) -> f64 {
    let b = samples.len();
    if b < 2 {
        return f64::NAN;
    }
    let mean = samples.iter().fold(Matrix::zeros(samples[0].nrows(), samples[0].ncols()), |a, s| a + s) / b as f64;
    let var_sum: f64 = samples.iter().map(|s| (s - &mean).norm_squared()).sum::<f64>() / (b - 1) as f64;
    (var_sum / b as f64).sqrt()
}

/// Policy iteration driven by `source`.
///
/// `reference`, when given, only fills [`AdpIterate::oracle_error`].
pub fn policy_iteration<S: DataSource + ?Sized>(
    source: &S,
    k0: &Matrix,
    q: &Matrix,
    r: &Matrix,
    settings: &PiSettings,
    reference: Option<&Matrix>,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<AdpRunResult> {
    let (m, n) = k0.shape();
    let mut gain = k0.clone();
    let mut iterates: Vec<AdpIterate> = Vec::new();
    let mut converged = false;

    for index in 0..settings.max_iter {
        let data = source.collect(index, &gain)?;
        let (theta, xi) = assemble_theta_xi(&data.mean, &gain, q, r)?;
        let step = solve_pi_step(&theta, &xi, n, m, r, settings.mode)?;

        let p_norm = step.p_hat.norm();
        if !p_norm.is_finite() || p_norm > DIVERGENCE_NORM {
            return Err(Error::IterationDiverged { iteration: index, norm: p_norm });
        }

        let mut batch_p_hat = Vec::with_capacity(data.batch_means.len());
        let mut batch_k_next = Vec::with_capacity(data.batch_means.len());
        for batch in &data.batch_means {
            let (bt, bx) = assemble_theta_xi(batch, &gain, q, r)?;
            // A batch may be too small to be well posed on its own.
            if let Ok(sol) = solve_pi_step(&bt, &bx, n, m, r, settings.mode) {
                batch_p_hat.push(sol.p_hat);
                batch_k_next.push(sol.k_next);
            }
        }

        let relative_change = iterates
            .last()
            .map(|prev| {
                let prev_p = &prev.step.p_hat;
                (&step.p_hat - prev_p).norm() / (1.0 + prev_p.norm())
            })
            .unwrap_or(f64::INFINITY);

        let iterate = AdpIterate {
            index,
            gain: gain.clone(),
            p_stderr: stderr_frobenius(&batch_p_hat),
            k_stderr: stderr_frobenius(&batch_k_next),
            oracle_error: reference.map(|p| (&step.p_hat - p).norm()),
            relative_change,
            batch_p_hat,
            batch_k_next,
            step,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&iterate)?;
        }
        gain = iterate.step.k_next.clone();
        iterates.push(iterate);
        if relative_change <= settings.tol {
            converged = true;
            break;
        }
    }

    let last = iterates.last().ok_or_else(|| Error::Invalid("max_iter must be at least 1".into()))?;
    Ok(AdpRunResult {
        p_final: last.step.p_hat.clone(),
        k_final: last.step.k_next.clone(),
        converged,
        iterations_used: iterates.len(),
        budget: source.budget(),
        iterates,
    })
}

/// Full configuration of a sampled ADP run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdpConfig {
    pub h: f64,
    pub delta_t: f64,
    /// Number of intervals `l`; `None` picks `n² + nm + m²` for square mode
    /// and twice that otherwise.
    pub intervals: Option<usize>,
    pub n_mc: usize,
    pub batches: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub mode: SolveMode,
    pub explore: ExplorationSignal,
    pub seed: u64,
}

impl AdpConfig {
    pub fn resolved_intervals(&self, n: usize, m: usize) -> usize {
        match (self.mode, self.intervals) {
            (SolveMode::Square, _) => full_unknowns(n, m),
            (_, Some(l)) => l,
            (_, None) => 2 * full_unknowns(n, m),
        }
    }

    pub fn settings(&self) -> PiSettings {
        PiSettings {
            max_iter: self.max_iter,
            tol: self.tol,
            mode: self.mode,
        }
    }

    pub fn sampling(&self, n: usize, m: usize) -> SamplingConfig {
        SamplingConfig {
            h: self.h,
            delta_t: self.delta_t,
            intervals: self.resolved_intervals(n, m),
            n_mc: self.n_mc,
            batches: self.batches,
            explore: self.explore.clone(),
            seed: self.seed,
        }
    }
}

/// Model-free policy iteration against a black-box plant.
pub fn run_adp<E: Environment>(
    env: &E,
    k0: &Matrix,
    q: &Matrix,
    r: &Matrix,
    config: &AdpConfig,
    reference: Option<&Matrix>,
    observer: Option<&mut Observer<'_>>,
) -> Result<AdpRunResult> {
    let (n, m) = (env.state_dim(), env.input_dim());
    if k0.shape() != (m, n) {
        return Err(Error::Dimension {
            context: "initial gain",
            expected: format!("{m}x{n}"),
            got: format!("{}x{}", k0.nrows(), k0.ncols()),
        });
    }
    let source = SampledData::new(env, config.sampling(n, m))?;
    policy_iteration(&source, k0, q, r, &config.settings(), reference, observer)
}

/// JSON form of one iterate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterateReport {
    pub index: usize,
    pub gain: Rows,
    pub p_hat: Rows,
    pub btp_hat: Rows,
    pub sigma_hat: Rows,
    pub k_next: Rows,
    pub condition_estimate: f64,
    pub rank: usize,
    pub relative_change: Option<f64>,
    pub p_stderr: Option<f64>,
    pub k_stderr: Option<f64>,
    pub residual_to_oracle: Option<f64>,
    pub warnings: Vec<String>,
}

/// JSON form of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdpReport {
    pub converged: bool,
    pub iterations_used: usize,
    pub budget: DataBudget,
    pub p_final: Rows,
    pub k_final: Rows,
    pub iterates: Vec<IterateReport>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl From<&AdpRunResult> for AdpReport {
    fn from(res: &AdpRunResult) -> Self {
        Self {
            converged: res.converged,
            iterations_used: res.iterations_used,
            budget: res.budget,
            p_final: matrix_to_rows(&res.p_final),
            k_final: matrix_to_rows(&res.k_final),
            iterates: res
                .iterates
                .iter()
                .map(|it| IterateReport {
                    index: it.index,
                    gain: matrix_to_rows(&it.gain),
                    p_hat: matrix_to_rows(&it.step.p_hat),
                    btp_hat: matrix_to_rows(&it.step.btp_hat),
                    sigma_hat: matrix_to_rows(&it.step.sigma_hat),
                    k_next: matrix_to_rows(&it.step.k_next),
                    condition_estimate: it.step.condition_estimate,
                    rank: it.step.rank,
                    relative_change: finite(it.relative_change),
                    p_stderr: finite(it.p_stderr),
                    k_stderr: finite(it.k_stderr),
                    residual_to_oracle: it.oracle_error,
                    warnings: it.step.warnings.clone(),
                })
                .collect(),
        }
    }
}

impl AdpRunResult {
    /// Per-iteration scalars as CSV.
    pub fn write_iterations_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iteration",
            "relative_change",
            "condition_estimate",
            "p_norm",
            "k_norm",
            "p_stderr",
            "residual_to_oracle",
        ])?;
        for it in &self.iterates {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                it.index.to_string(),
                opt(finite(it.relative_change)),
                it.step.condition_estimate.to_string(),
                it.step.p_hat.norm().to_string(),
                it.step.k_next.norm().to_string(),
                opt(finite(it.p_stderr)),
                opt(it.oracle_error),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
