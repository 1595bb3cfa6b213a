//! Exact expected data matrices, computed from the model.
//!
//! The first and second moments of the closed loop `u = −Kx + e(t)` obey
//!
//! ```text
//! ṁ = A_K m + B e
//! Ṡ = A_K S + S A_Kᵀ + B e mᵀ + m eᵀ Bᵀ + Σ BFᵢ S FᵢᵀBᵀ + Σ BGᵢ U GᵢᵀBᵀ
//! U = K S Kᵀ − K m eᵀ − e mᵀ Kᵀ + e eᵀ
//! ```
//!
//! Integrating these together with `∫S`, `∫U` and `∫m eᵀ` gives the
//! expectations of every block in [`DataMatrices`] in continuous time, with
//! no sampling or quadrature bias. This is a reference for testing the
//! data-driven loop; it reads the model and is not usable by the learner.

use crate::adp::{CollectedData, DataBudget, DataMatrices, DataSource};
use crate::error::{Error, Result};
use crate::linops::Matrix;
use crate::model::{InitialStateSpec, LinearStochasticSystem};
use crate::sde::ExplorationSignal;

/// Moment-ODE data source over `intervals` contiguous windows of
/// `delta_t`, each integrated with `substeps` classical RK4 steps.
#[derive(Debug, Clone)]
pub struct ExpectedData {
    system: LinearStochasticSystem,
    initial: InitialStateSpec,
    explore: ExplorationSignal,
    delta_t: f64,
    intervals: usize,
    substeps: usize,
}

#[derive(Clone)]
struct Moments {
    mean: Matrix,
    second: Matrix,
    i_xx: Matrix,
    i_uu: Matrix,
    /// `∫ e mᵀ`, `m × n`.
    i_ex: Matrix,
}

impl Moments {
    fn axpy(&self, k: &Moments, step: f64) -> Moments {
        Moments {
            mean: &self.mean + &k.mean * step,
            second: &self.second + &k.second * step,
            i_xx: &self.i_xx + &k.i_xx * step,
            i_uu: &self.i_uu + &k.i_uu * step,
            i_ex: &self.i_ex + &k.i_ex * step,
        }
    }
}

struct ClosedLoop<'a> {
    a_k: Matrix,
    b: &'a Matrix,
    gain: &'a Matrix,
    bf: Vec<Matrix>,
    bg: Vec<Matrix>,
}

impl ClosedLoop<'_> {
    fn rate(&self, y: &Moments, e: &Matrix) -> Moments {
        let km = self.gain * &y.mean;
        let u2 = self.gain * &y.second * self.gain.transpose() - &km * e.transpose() - e * km.transpose() + e * e.transpose();
        let bem = self.b * e * y.mean.transpose();
        let mut ds = &self.a_k * &y.second + &y.second * self.a_k.transpose() + &bem + bem.transpose();
        for bf in &self.bf {
            ds += bf * &y.second * bf.transpose();
        }
        for bg in &self.bg {
            ds += bg * &u2 * bg.transpose();
        }
        Moments {
            mean: &self.a_k * &y.mean + self.b * e,
            second: ds,
            i_xx: y.second.clone(),
            i_uu: u2,
            i_ex: e * y.mean.transpose(),
        }
    }
}

impl ExpectedData {
    pub fn new(
        system: LinearStochasticSystem,
        initial: InitialStateSpec,
        explore: ExplorationSignal,
        delta_t: f64,
        intervals: usize,
        substeps: usize,
    ) -> Result<Self> {
        explore.validate()?;
        if explore.has_dither() {
            return Err(Error::Invalid("exact expectations need a deterministic exploration signal".into()));
        }
        if !(delta_t > 0.0) || intervals == 0 || substeps == 0 {
            return Err(Error::Invalid("delta_t, intervals and substeps must be positive".into()));
        }
        if initial.dim() != system.n() {
            return Err(Error::Dimension {
                context: "initial state",
                expected: system.n().to_string(),
                got: initial.dim().to_string(),
            });
        }
        Ok(Self {
            system,
            initial,
            explore,
            delta_t,
            intervals,
            substeps,
        })
    }

    /// Expected blocks for policy `gain`.
    pub fn expected_blocks(&self, gain: &Matrix) -> Result<DataMatrices> {
        let (n, m) = (self.system.n(), self.system.m());
        self.system.check_gain(gain)?;
        let sys = &self.system;
        let lp = ClosedLoop {
            a_k: &sys.a - &sys.b * gain,
            b: &sys.b,
            gain,
            bf: sys.f.iter().map(|f| &sys.b * f).collect(),
            bg: sys.g.iter().map(|g| &sys.b * g).collect(),
        };
        let explore_at = |t: f64| {
            let mut e = vec![0.0; m];
            self.explore.sinusoids_into(t, &mut e);
            Matrix::from_vec(m, 1, e)
        };

        let mut y = Moments {
            mean: Matrix::from_column_slice(n, 1, self.initial.mean.as_slice()),
            second: self.initial.second_moment(),
            i_xx: Matrix::zeros(n, n),
            i_uu: Matrix::zeros(m, m),
            i_ex: Matrix::zeros(m, n),
        };
        let dt = self.delta_t / self.substeps as f64;
        let mut dm = DataMatrices::zeros(self.intervals, n, m, dt);
        for row in 0..self.intervals {
            let t_start = row as f64 * self.delta_t;
            let s_start = y.second.clone();
            y.i_xx.fill(0.0);
            y.i_uu.fill(0.0);
            y.i_ex.fill(0.0);
            for step in 0..self.substeps {
                let t = t_start + step as f64 * dt;
                let (e0, e_mid, e1) = (explore_at(t), explore_at(t + 0.5 * dt), explore_at(t + dt));
                let k1 = lp.rate(&y, &e0);
                let k2 = lp.rate(&y.axpy(&k1, 0.5 * dt), &e_mid);
                let k3 = lp.rate(&y.axpy(&k2, 0.5 * dt), &e_mid);
                let k4 = lp.rate(&y.axpy(&k3, dt), &e1);
                y = y
                    .axpy(&k1, dt / 6.0)
                    .axpy(&k2, dt / 3.0)
                    .axpy(&k3, dt / 3.0)
                    .axpy(&k4, dt / 6.0);
            }
            if y.second.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    step: (row + 1) * self.substeps,
                    reason: "second moment is not finite".into(),
                });
            }
            for i in 0..n {
                for k in 0..n {
                    dm.delta_xx[(row, i * n + k)] = y.second[(i, k)] - s_start[(i, k)];
                    dm.i_xx[(row, i * n + k)] = y.i_xx[(i, k)];
                }
                for r in 0..m {
                    dm.i_xw[(row, i * m + r)] = y.i_ex[(r, i)];
                }
            }
            for a in 0..m {
                for b in 0..m {
                    dm.i_uu[(row, a * m + b)] = y.i_uu[(a, b)];
                }
            }
            dm.interval_bounds.push((t_start, t_start + self.delta_t));
        }
        Ok(dm)
    }
}

impl DataSource for ExpectedData {
    fn collect(&self, _iteration: usize, gain: &Matrix) -> Result<CollectedData> {
        Ok(CollectedData {
            mean: self.expected_blocks(gain)?,
            batch_means: Vec::new(),
            runs: 1,
        })
    }

    fn budget(&self) -> DataBudget {
        DataBudget {
            intervals: self.intervals,
            n_mc: 0,
            h: 0.0,
            delta_t: self.delta_t,
        }
    }
}
