//! Euler–Maruyama simulation of the closed loop `u = −Kx + e(t)`.
//!
//! Besides states and inputs, every step records the increment
//!
//! ```text
//! Δŵ(t_j) = e(t_j) h + Σᵢ Fᵢ x(t_j) ΔW₁ᵢ + Σᵢ Gᵢ u(t_j) ΔW₂ᵢ
//! ```
//!
//! built from the simulator's own Brownian increments, which is what the
//! data-driven policy evaluation consumes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adp::{Environment, RolloutRequest};
use crate::error::{Error, Result};
use crate::linops::{Matrix, Vector};
use crate::model::{InitialStateSpec, LinearStochasticSystem};
use crate::rng::{NormalStream, Stream};
use std::sync::{Arc, Mutex};

/// Paths whose state norm exceeds this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplorationKind {
    /// Sum of sinusoids plus optional Gaussian dither.
    SumOfSinusoids,
    /// Gaussian dither only.
    Gaussian,
    Zero,
}

/// Probing signal `e(t)` added to the feedback.
///
/// Sinusoid `k` drives input channel `k mod m`; `phases[c]` shifts every
/// sinusoid of channel `c`. Dither is piecewise constant on the sampling
/// grid, one independent draw per step and channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationSignal {
    pub kind: ExplorationKind,
    #[serde(default)]
    pub amplitudes: Vec<f64>,
    /// Angular frequencies, rad per time unit.
    #[serde(default)]
    pub frequencies: Vec<f64>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub phases: Vec<f64>,
}

impl ExplorationSignal {
    pub fn zero() -> Self {
        Self {
            kind: ExplorationKind::Zero,
            amplitudes: Vec::new(),
            frequencies: Vec::new(),
            noise_std: 0.0,
            phases: Vec::new(),
        }
    }

    /// Ten sinusoids per channel at frequencies `1.2·√p` for the first
    /// `10m` primes `p`, with amplitudes `scale / (i + 1)` for the `i`-th
    /// sinusoid of a channel.
    pub fn default_for(m: usize, scale: f64) -> Self {
        const PER_CHANNEL: usize = 10;
        let primes = first_primes(PER_CHANNEL * m);
        let mut amplitudes = Vec::with_capacity(primes.len());
        let mut frequencies = Vec::with_capacity(primes.len());
        for (k, p) in primes.iter().enumerate() {
            let harmonic = k / m;
            amplitudes.push(scale / (harmonic as f64 + 1.0));
            frequencies.push(1.2 * (*p as f64).sqrt());
        }
        let phases = (0..m).map(|c| 0.7 * c as f64).collect();
        Self {
            kind: ExplorationKind::SumOfSinusoids,
            amplitudes,
            frequencies,
            noise_std: 0.0,
            phases,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.amplitudes.len() != self.frequencies.len() {
            return Err(Error::Invalid(format!(
                "exploration has {} amplitudes but {} frequencies",
                self.amplitudes.len(),
                self.frequencies.len()
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Invalid(format!("exploration noise_std must be >= 0, got {}", self.noise_std)));
        }
        let all = self.amplitudes.iter().chain(&self.frequencies).chain(&self.phases);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("exploration parameters must be finite".into()));
        }
        Ok(())
    }

    /// Deterministic part bound per channel, `Σ|a_k|` over the channel's sinusoids.
    pub fn amplitude_bound(&self, m: usize) -> Vec<f64> {
        let mut bound = vec![0.0; m];
        if self.kind == ExplorationKind::SumOfSinusoids && m > 0 {
            for (k, a) in self.amplitudes.iter().enumerate() {
                bound[k % m] += a.abs();
            }
        }
        bound
    }

    pub fn has_dither(&self) -> bool {
        self.kind != ExplorationKind::Zero && self.noise_std > 0.0
    }

    /// Deterministic part only, one entry per input channel.
    pub fn sinusoids_into(&self, t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if self.kind != ExplorationKind::SumOfSinusoids {
            return;
        }
        let m = out.len();
        for (k, (a, w)) in self.amplitudes.iter().zip(&self.frequencies).enumerate() {
            let c = k % m;
            let phase = self.phases.get(c).copied().unwrap_or(0.0);
            out[c] += a * (w * t + phase).sin();
        }
    }
}

/// Evaluates `e(t)` for grid step `step`; dither draws come from `dither`.
pub fn exploration_value(explore: &ExplorationSignal, t: f64, step: u64, dither: &NormalStream, m: usize) -> Vector {
    let mut out = vec![0.0; m];
    explore.sinusoids_into(t, &mut out);
    if explore.has_dither() {
        let mut z = vec![0.0; m];
        dither.fill(step, &mut z);
        for (o, zi) in out.iter_mut().zip(&z) {
            *o += explore.noise_std * zi;
        }
    }
    Vector::from_vec(out)
}

/// Sinusoid evaluation by phasor rotation, resynchronised every
/// `RESYNC` steps so rounding does not accumulate.
struct SinusoidBank {
    channel: Vec<usize>,
    amplitude: Vec<f64>,
    omega: Vec<f64>,
    phase: Vec<f64>,
    rot: Vec<(f64, f64)>,
    state: Vec<(f64, f64)>,
}

impl SinusoidBank {
    const RESYNC: usize = 256;

    fn new(explore: &ExplorationSignal, m: usize, h: f64) -> Self {
        let active = explore.kind == ExplorationKind::SumOfSinusoids && m > 0;
        let count = if active { explore.amplitudes.len() } else { 0 };
        let channel: Vec<usize> = (0..count).map(|k| k % m).collect();
        let phase = channel.iter().map(|c| explore.phases.get(*c).copied().unwrap_or(0.0)).collect();
        let omega: Vec<f64> = explore.frequencies[..count].to_vec();
        Self {
            rot: omega.iter().map(|w| ((w * h).cos(), (w * h).sin())).collect(),
            state: vec![(1.0, 0.0); count],
            amplitude: explore.amplitudes[..count].to_vec(),
            channel,
            omega,
            phase,
        }
    }

    /// Writes the deterministic exploration at step `j` (time `t`) into `out`.
    fn eval(&mut self, j: usize, t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let resync = j % Self::RESYNC == 0;
        for k in 0..self.amplitude.len() {
            let (c, s) = if resync {
                let (s, c) = (self.omega[k] * t + self.phase[k]).sin_cos();
                (c, s)
            } else {
                let (c, s) = self.state[k];
                let (cr, sr) = self.rot[k];
                (c * cr - s * sr, s * cr + c * sr)
            };
            self.state[k] = (c, s);
            out[self.channel[k]] += self.amplitude[k] * s;
        }
    }
}

fn first_primes(count: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(count);
    let mut candidate = 2u64;
    while primes.len() < count {
        if primes.iter().take_while(|p| *p * *p <= candidate).all(|p| candidate % p != 0) {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}

/// Where `x(t₀)` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Fixed(Vector),
    /// Gaussian draw from the spec, keyed by the run's seed and path.
    Sampled(InitialStateSpec),
}

/// One simulated run on the grid `t₀ + jh`, `j = 0..=N`.
///
/// Per-step records (`inputs`, `explore`, `dw_hat`, `dw1`, `dw2`) hold `N`
/// rows; `states` holds `N + 1`. All are flat row-major buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub t0: f64,
    pub n: usize,
    pub m: usize,
    pub q1: usize,
    pub q2: usize,
    pub states: Vec<f64>,
    pub inputs: Vec<f64>,
    pub explore: Vec<f64>,
    pub dw_hat: Vec<f64>,
    pub dw1: Vec<f64>,
    pub dw2: Vec<f64>,
    pub seed: u64,
    pub path: u64,
    pub diagnostics: Vec<String>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len() / self.m.max(1)
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.h
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|j| self.time(j)).collect()
    }

    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.n..(j + 1) * self.n]
    }

    pub fn input(&self, j: usize) -> &[f64] {
        &self.inputs[j * self.m..(j + 1) * self.m]
    }

    pub fn exploration(&self, j: usize) -> &[f64] {
        &self.explore[j * self.m..(j + 1) * self.m]
    }

    pub fn dw_hat(&self, j: usize) -> &[f64] {
        &self.dw_hat[j * self.m..(j + 1) * self.m]
    }

    pub fn dw1(&self, j: usize) -> &[f64] {
        &self.dw1[j * self.q1..(j + 1) * self.q1]
    }

    pub fn dw2(&self, j: usize) -> &[f64] {
        &self.dw2[j * self.q2..(j + 1) * self.q2]
    }

    /// CSV with columns `t, x1..xn, u1..um, dwhat1..dwhatm`; the last row
    /// carries the final state only.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n).map(|i| format!("x{i}")));
        header.extend((1..=self.m).map(|i| format!("u{i}")));
        header.extend((1..=self.m).map(|i| format!("dwhat{i}")));
        w.write_record(&header)?;
        let steps = self.steps();
        for j in 0..=steps {
            let mut row = vec![self.time(j).to_string()];
            row.extend(self.state(j).iter().map(f64::to_string));
            if j < steps {
                row.extend(self.input(j).iter().map(f64::to_string));
                row.extend(self.dw_hat(j).iter().map(f64::to_string));
            } else {
                row.extend(std::iter::repeat_n(String::new(), 2 * self.m));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// One Euler–Maruyama step,
/// `x + (Ax + Bu)h + B(Σᵢ Fᵢx ΔW₁ᵢ + Σᵢ Gᵢu ΔW₂ᵢ)`.
pub fn em_step(
    system: &LinearStochasticSystem,
    x: &Vector,
    u: &Vector,
    dw1: &[f64],
    dw2: &[f64],
    h: f64,
) -> Result<Vector> {
    let (n, m) = (system.n(), system.m());
    if x.len() != n || u.len() != m || dw1.len() != system.q1() || dw2.len() != system.q2() {
        return Err(Error::Dimension {
            context: "em_step",
            expected: format!("x:{n} u:{m} dW1:{} dW2:{}", system.q1(), system.q2()),
            got: format!("x:{} u:{} dW1:{} dW2:{}", x.len(), u.len(), dw1.len(), dw2.len()),
        });
    }
    let mut noise = Vector::zeros(m);
    for (fi, dw) in system.f.iter().zip(dw1) {
        noise += fi * x * *dw;
    }
    for (gi, dw) in system.g.iter().zip(dw2) {
        noise += gi * u * *dw;
    }
    Ok(x + (&system.a * x + &system.b * u) * h + &system.b * noise)
}

/// Everything needed for one run besides the system.
#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub gain: Matrix,
    pub explore: ExplorationSignal,
    pub initial: InitialCondition,
    pub t0: f64,
    pub duration: f64,
    pub h: f64,
    pub seed: u64,
    pub path: u64,
    /// Each Brownian increment is the sum of this many draws of variance
    /// `h / substeps`. Runs at `h` and `h / 2` whose `substeps` differ by the
    /// same factor share one underlying Brownian path.
    pub substeps: u32,
}

impl SimulationSpec {
    pub fn new(gain: Matrix, explore: ExplorationSignal, initial: InitialCondition, duration: f64, h: f64, seed: u64) -> Self {
        Self {
            gain,
            explore,
            initial,
            t0: 0.0,
            duration,
            h,
            seed,
            path: 0,
            substeps: 1,
        }
    }
}

/// Number of grid steps in `duration`, rejecting non-multiples of `h`.
pub fn grid_steps(duration: f64, h: f64) -> Result<usize> {
    if !(h > 0.0) || !(duration > 0.0) {
        return Err(Error::Invalid(format!("need h > 0 and duration > 0, got h={h}, duration={duration}")));
    }
    let steps = (duration / h).round();
    if (steps * h - duration).abs() > 1e-9 * duration.max(h) {
        return Err(Error::Invalid(format!("duration {duration} is not an integer multiple of h = {h}")));
    }
    Ok(steps as usize)
}

/// Draws `x(t₀)` for `(seed, path)` from `spec` via its symmetric square root.
pub fn sample_initial_state(spec: &InitialStateSpec, seed: u64, path: u64) -> Vector {
    let n = spec.dim();
    let eig = spec.covariance.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * Matrix::from_diagonal(&sqrt_vals);
    let mut z = vec![0.0; n];
    NormalStream::new(seed, path, Stream::InitialState).fill(0, &mut z);
    &spec.mean + root * Vector::from_vec(z)
}

/// Row-major copies of the system matrices for the inner loop.
struct Kernel {
    n: usize,
    m: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    k: Vec<f64>,
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
}

fn row_major(m: &Matrix) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Kernel {
    fn new(system: &LinearStochasticSystem, gain: &Matrix) -> Self {
        Self {
            n: system.n(),
            m: system.m(),
            a: row_major(&system.a),
            b: row_major(&system.b),
            k: row_major(gain),
            f: system.f.iter().map(row_major).collect(),
            g: system.g.iter().map(row_major).collect(),
        }
    }
}

/// Simulates `system` under `u = −Kx + e(t)` on the grid of `spec`.
///
/// Fails on a duration that is not a multiple of `h` and on divergence; an
/// inadmissible gain only adds a diagnostic.
pub fn simulate(system: &LinearStochasticSystem, spec: &SimulationSpec) -> Result<Trajectory> {
    system.check_gain(&spec.gain)?;
    let mut diagnostics = Vec::new();
    let report = crate::model::check_admissible(system, &spec.gain)?;
    if !report.is_stable {
        diagnostics.push(format!(
            "gain is not mean-square admissible (abscissa {:.3e})",
            report.spectral_abscissa
        ));
    }
    let mut traj = integrate(system, spec)?;
    traj.diagnostics = diagnostics;
    Ok(traj)
}

/// [`simulate`] without the admissibility check.
pub(crate) fn integrate(system: &LinearStochasticSystem, spec: &SimulationSpec) -> Result<Trajectory> {
    integrate_with(system, spec, None)
}

/// Deterministic exploration samples on a grid, shared by every path that
/// uses the same signal, grid and start time.
#[derive(Debug)]
struct ExplorationTable {
    explore: ExplorationSignal,
    t0: f64,
    h: f64,
    values: Vec<f64>,
}

impl ExplorationTable {
    fn build(explore: &ExplorationSignal, t0: f64, h: f64, steps: usize, m: usize) -> Self {
        let mut bank = SinusoidBank::new(explore, m, h);
        let mut values = vec![0.0; steps * m];
        for (j, e) in values.chunks_exact_mut(m.max(1)).enumerate().take(steps) {
            bank.eval(j, t0 + j as f64 * h, e);
        }
        Self {
            explore: explore.clone(),
            t0,
            h,
            values,
        }
    }

    fn covers(&self, explore: &ExplorationSignal, t0: f64, h: f64, len: usize) -> bool {
        self.t0 == t0 && self.h == h && self.values.len() >= len && &self.explore == explore
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn integrate_with(system: &LinearStochasticSystem, spec: &SimulationSpec, table: Option<&ExplorationTable>) -> Result<Trajectory> {
    spec.explore.validate()?;
    let steps = grid_steps(spec.duration, spec.h)?;
    if spec.substeps == 0 {
        return Err(Error::Invalid("substeps must be >= 1".into()));
    }
    let kern = Kernel::new(system, &spec.gain);
    let (n, m, q1, q2) = (kern.n, kern.m, system.q1(), system.q2());
    let h = spec.h;

    let x0 = match &spec.initial {
        InitialCondition::Fixed(x) => x.clone(),
        InitialCondition::Sampled(init) => sample_initial_state(init, spec.seed, spec.path),
    };
    if x0.len() != n {
        return Err(Error::Dimension {
            context: "initial state",
            expected: n.to_string(),
            got: x0.len().to_string(),
        });
    }

    let table = table.filter(|t| t.covers(&spec.explore, spec.t0, h, steps * m));
    let mut states = vec![0.0; (steps + 1) * n];
    let mut inputs = vec![0.0; steps * m];
    let mut explore = vec![0.0; steps * m];
    let mut dw_hat = vec![0.0; steps * m];
    let mut dw1 = vec![0.0; steps * q1];
    let mut dw2 = vec![0.0; steps * q2];
    states[..n].copy_from_slice(x0.as_slice());

    let brownian = NormalStream::new(spec.seed, spec.path, Stream::Brownian);
    let dither = NormalStream::new(spec.seed, spec.path, Stream::Dither);
    let sub = spec.substeps as usize;
    let sub_std = (h / sub as f64).sqrt();
    let q = q1 + q2;

    let mut bank = SinusoidBank::new(&spec.explore, m, h);
    let mut z_dither = vec![0.0; m];
    let mut w = vec![0.0; m];
    let mut dw = vec![0.0; q];
    let mut z = vec![0.0; q];
    let mut scratch = vec![0.0; m];

    for j in 0..steps {
        let t = spec.t0 + j as f64 * h;
        let e = &mut explore[j * m..(j + 1) * m];
        match table {
            Some(tab) => e.copy_from_slice(&tab.values[j * m..(j + 1) * m]),
            None => bank.eval(j, t, e),
        }
        if spec.explore.has_dither() {
            dither.fill(j as u64, &mut z_dither);
            for (ei, zi) in e.iter_mut().zip(&z_dither) {
                *ei += spec.explore.noise_std * zi;
            }
        }

        dw.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..sub {
            brownian.fill((j * sub + s) as u64, &mut z);
            for (d, zi) in dw.iter_mut().zip(&z) {
                *d += sub_std * zi;
            }
        }

        let (past, future) = states.split_at_mut((j + 1) * n);
        let x = &past[j * n..];
        let x_next = &mut future[..n];
        let u = &mut inputs[j * m..(j + 1) * m];
        for ((ur, krow), er) in u.iter_mut().zip(kern.k.chunks_exact(n)).zip(e.iter()) {
            *ur = er - dot(krow, x);
        }

        // w = Σ Fᵢ x ΔW₁ᵢ + Σ Gᵢ u ΔW₂ᵢ
        w.iter_mut().for_each(|v| *v = 0.0);
        for (fi, d) in kern.f.iter().zip(&dw[..q1]) {
            for (wr, frow) in w.iter_mut().zip(fi.chunks_exact(n)) {
                *wr += dot(frow, x) * d;
            }
        }
        for (gi, d) in kern.g.iter().zip(&dw[q1..]) {
            for (wr, grow) in w.iter_mut().zip(gi.chunks_exact(m)) {
                *wr += dot(grow, u) * d;
            }
        }

        for c in 0..m {
            scratch[c] = u[c] * h + w[c];
        }
        let mut norm2 = 0.0;
        for ((xn, (arow, brow)), xr) in x_next
            .iter_mut()
            .zip(kern.a.chunks_exact(n).zip(kern.b.chunks_exact(m)))
            .zip(x.iter())
        {
            *xn = xr + dot(arow, x) * h + dot(brow, &scratch);
            norm2 += *xn * *xn;
        }

        let norm = norm2.sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step: j + 1,
                reason: format!("|x| = {norm:.3e} exceeds {DIVERGENCE_LIMIT:.0e}"),
            });
        }

        for ((dh, ei), wi) in dw_hat[j * m..(j + 1) * m].iter_mut().zip(e.iter()).zip(&w) {
            *dh = ei * h + wi;
        }
        dw1[j * q1..(j + 1) * q1].copy_from_slice(&dw[..q1]);
        dw2[j * q2..(j + 1) * q2].copy_from_slice(&dw[q1..]);
    }

    Ok(Trajectory {
        h,
        t0: spec.t0,
        n,
        m,
        q1,
        q2,
        states,
        inputs,
        explore,
        dw_hat,
        dw1,
        dw2,
        seed: spec.seed,
        path: spec.path,
        diagnostics: Vec::new(),
    })
}

/// The true system behind the black-box [`Environment`] interface.
#[derive(Debug)]
pub struct SimulatedPlant {
    system: LinearStochasticSystem,
    initial: InitialStateSpec,
    table: Mutex<Option<Arc<ExplorationTable>>>,
}

impl Clone for SimulatedPlant {
    fn clone(&self) -> Self {
        Self::new(self.system.clone(), self.initial.clone())
    }
}

impl SimulatedPlant {
    pub fn new(system: LinearStochasticSystem, initial: InitialStateSpec) -> Self {
        Self {
            system,
            initial,
            table: Mutex::new(None),
        }
    }

    pub fn system(&self) -> &LinearStochasticSystem {
        &self.system
    }

    pub fn initial(&self) -> &InitialStateSpec {
        &self.initial
    }

    fn exploration_table(&self, explore: &ExplorationSignal, h: f64, steps: usize) -> Arc<ExplorationTable> {
        let m = self.system.m();
        let mut slot = self.table.lock().unwrap_or_else(|p| p.into_inner());
        match slot.as_ref() {
            Some(tab) if tab.covers(explore, 0.0, h, steps * m) => Arc::clone(tab),
            _ => {
                let tab = Arc::new(ExplorationTable::build(explore, 0.0, h, steps, m));
                *slot = Some(Arc::clone(&tab));
                tab
            }
        }
    }
}

impl Environment for SimulatedPlant {
    fn state_dim(&self) -> usize {
        self.system.n()
    }

    fn input_dim(&self) -> usize {
        self.system.m()
    }

    fn rollout(&self, request: &RolloutRequest<'_>) -> Result<Trajectory> {
        let spec = SimulationSpec {
            gain: request.gain.clone(),
            explore: request.explore.clone(),
            initial: InitialCondition::Sampled(self.initial.clone()),
            t0: 0.0,
            duration: request.duration,
            h: request.h,
            seed: request.seed,
            path: request.path,
            substeps: 1,
        };
        let steps = grid_steps(spec.duration, spec.h)?;
        let table = self.exploration_table(&spec.explore, spec.h, steps);
        integrate_with(&self.system, &spec, Some(&table))
    }
}
