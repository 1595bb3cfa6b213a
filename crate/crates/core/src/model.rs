//! Linear stochastic systems with state- and control-dependent noise,
//!
//! ```text
//! dx = (Ax + Bu) dt + B dw,   dw = Σᵢ Fᵢ x dw₁ᵢ + Σᵢ Gᵢ u dw₂ᵢ
//! ```
//!
//! together with quadratic cost weights `Q`, `R`, the initial-state
//! distribution, JSON loading, and the two-dimensional arm preset.

use std::fmt;

use nalgebra::dmatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{self, Matrix, StabilityReport, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearStochasticSystem {
    pub a: Matrix,
    pub b: Matrix,
    /// State-noise gains, each `m × n`.
    pub f: Vec<Matrix>,
    /// Control-noise gains, each `m × m`.
    pub g: Vec<Matrix>,
    pub q: Matrix,
    pub r: Matrix,
}

/// Mean and covariance of `x(0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialStateSpec {
    pub mean: Vector,
    pub covariance: Matrix,
}

impl InitialStateSpec {
    pub fn zero_mean(covariance: Matrix) -> Self {
        Self {
            mean: Vector::zeros(covariance.nrows()),
            covariance,
        }
    }

    /// `E[x(0) x(0)ᵀ] = Σ₀ + μ₀μ₀ᵀ`.
    pub fn second_moment(&self) -> Matrix {
        &self.covariance + &self.mean * self.mean.transpose()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// One failed well-posedness check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic(pub String);

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl LinearStochasticSystem {
    pub fn new(a: Matrix, b: Matrix, f: Vec<Matrix>, g: Vec<Matrix>, q: Matrix, r: Matrix) -> Self {
        Self { a, b, f, g, q, r }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn q1(&self) -> usize {
        self.f.len()
    }

    pub fn q2(&self) -> usize {
        self.g.len()
    }

    /// Copy of the system with every noise gain removed.
    pub fn without_noise(&self) -> Self {
        Self {
            f: Vec::new(),
            g: Vec::new(),
            ..self.clone()
        }
    }

    /// `(A − BK, [BFᵢ…, −BGᵢK…])`: drift and multiplicative noise maps of
    /// the closed loop under `u = −Kx`.
    pub fn closed_loop(&self, k: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        self.check_gain(k)?;
        let closed = &self.a - &self.b * k;
        let maps = self
            .f
            .iter()
            .map(|fi| &self.b * fi)
            .chain(self.g.iter().map(|gi| -(&self.b * gi * k)))
            .collect();
        Ok((closed, maps))
    }

    pub fn check_gain(&self, k: &Matrix) -> Result<()> {
        if k.shape() != (self.m(), self.n()) {
            return Err(Error::Dimension {
                context: "feedback gain",
                expected: format!("{}x{}", self.m(), self.n()),
                got: format!("{}x{}", k.nrows(), k.ncols()),
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut push = |s: String| out.push(Diagnostic(s));
        let (n, m) = (self.a.nrows(), self.b.ncols());

        if n == 0 || !self.a.is_square() {
            push(format!("A must be square and non-empty, got {}x{}", self.a.nrows(), self.a.ncols()));
        }
        if self.b.nrows() != n || m == 0 {
            push(format!("B must be {n}xm with m >= 1, got {}x{}", self.b.nrows(), self.b.ncols()));
        }
        for (i, fi) in self.f.iter().enumerate() {
            if fi.shape() != (m, n) {
                push(format!("F[{i}] must be {m}x{n}, got {}x{}", fi.nrows(), fi.ncols()));
            }
        }
        for (i, gi) in self.g.iter().enumerate() {
            if gi.shape() != (m, m) {
                push(format!("G[{i}] must be {m}x{m}, got {}x{}", gi.nrows(), gi.ncols()));
            }
        }
        if self.q.shape() != (n, n) {
            push(format!("Q must be {n}x{n}, got {}x{}", self.q.nrows(), self.q.ncols()));
        } else if !is_symmetric(&self.q) {
            push("Q not symmetric".into());
        } else if min_eigenvalue(&self.q) < -definiteness_tol(&self.q) {
            push("Q not positive semidefinite".into());
        }
        if self.r.shape() != (m, m) {
            push(format!("R must be {m}x{m}, got {}x{}", self.r.nrows(), self.r.ncols()));
        } else if !is_symmetric(&self.r) {
            push("R not symmetric".into());
        } else if min_eigenvalue(&self.r) <= definiteness_tol(&self.r) {
            push("R not positive definite".into());
        }

        let named = [("A", &self.a), ("B", &self.b), ("Q", &self.q), ("R", &self.r)];
        for (name, mat) in named {
            if mat.iter().any(|v| !v.is_finite()) {
                push(format!("{name} has non-finite entries"));
            }
        }
        for (i, mat) in self.f.iter().chain(&self.g).enumerate() {
            if mat.iter().any(|v| !v.is_finite()) {
                push(format!("noise gain {i} has non-finite entries"));
            }
        }
        out
    }

    /// [`validate`](Self::validate) turned into an error carrying every diagnostic.
    pub fn ensure_valid(&self) -> Result<()> {
        let diags = self.validate();
        if diags.is_empty() {
            Ok(())
        } else {
            let joined: Vec<_> = diags.iter().map(|d| d.0.as_str()).collect();
            Err(Error::Invalid(joined.join("; ")))
        }
    }
}

/// `K` is admissible iff the closed loop is mean-square stable.
pub fn check_admissible(system: &LinearStochasticSystem, k: &Matrix) -> Result<StabilityReport> {
    linops::mean_square_stability(system, k)
}

pub fn validate_initial_state(spec: &InitialStateSpec, n: usize) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if spec.mean.len() != n {
        out.push(Diagnostic(format!("x0_mean must have {n} entries, got {}", spec.mean.len())));
    }
    if spec.covariance.shape() != (n, n) {
        out.push(Diagnostic(format!(
            "x0_cov must be {n}x{n}, got {}x{}",
            spec.covariance.nrows(),
            spec.covariance.ncols()
        )));
    } else if !is_symmetric(&spec.covariance) {
        out.push(Diagnostic("x0_cov not symmetric".into()));
    } else if min_eigenvalue(&spec.covariance) < -definiteness_tol(&spec.covariance) {
        out.push(Diagnostic("x0_cov not positive semidefinite".into()));
    }
    if spec.mean.iter().chain(spec.covariance.iter()).any(|v| !v.is_finite()) {
        out.push(Diagnostic("initial state has non-finite entries".into()));
    }
    out
}

fn is_symmetric(m: &Matrix) -> bool {
    (m - m.transpose()).norm() <= 1e-12 * (1.0 + m.norm())
}

fn definiteness_tol(m: &Matrix) -> f64 {
    1e-12 * (1.0 + m.norm())
}

fn min_eigenvalue(m: &Matrix) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

/// Parameters of the planar arm model
///
/// ```text
/// dp = v dt,   m dv = (a − b v + f) dt,   τ da = (u − a) dt + dw,   f = L v
/// ```
///
/// with control-dependent noise `dw = G₁u dw₁ + G₂u dw₂`,
/// `G₁ = [[c₁,0],[c₂,0]]`, `G₂ = [[0,c₂],[0,c₁]]`. State order is
/// `(p_x, p_y, v_x, v_y, a_x, a_y)`. The defaults are placeholders, not
/// measured values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmParams {
    pub mass: f64,
    pub viscosity: f64,
    pub time_constant: f64,
    pub c1: f64,
    pub c2: f64,
    /// Velocity feedback of the force field, rows of a 2×2 matrix.
    pub force_field: [[f64; 2]; 2],
    /// Diagonal of `Q`.
    pub q_diag: [f64; 6],
    /// Diagonal of `R`.
    pub r_diag: [f64; 2],
    pub x0_mean: [f64; 6],
    /// Diagonal of the initial covariance.
    pub x0_cov_diag: [f64; 6],
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            mass: 1.3,
            viscosity: 10.0,
            time_constant: 0.05,
            c1: 0.075,
            c2: 0.025,
            force_field: [[0.0, 2.0], [-2.0, 0.0]],
            q_diag: [1.0; 6],
            r_diag: [1.0; 2],
            x0_mean: [0.0; 6],
            x0_cov_diag: [0.01; 6],
        }
    }
}

pub const ARM_PRESET: &str = "sensorimotor-arm";

pub fn sensorimotor_arm(params: &ArmParams) -> Result<(LinearStochasticSystem, InitialStateSpec)> {
    if !(params.mass > 0.0) {
        return Err(Error::Invalid(format!("arm mass must be positive, got {}", params.mass)));
    }
    if !(params.time_constant > 0.0) {
        return Err(Error::Invalid(format!(
            "arm time constant must be positive, got {}",
            params.time_constant
        )));
    }
    if !(params.viscosity >= 0.0) {
        return Err(Error::Invalid(format!(
            "arm viscosity must be non-negative, got {}",
            params.viscosity
        )));
    }
    let (m, b, tau) = (params.mass, params.viscosity, params.time_constant);
    let l = &params.force_field;

    let mut a = Matrix::zeros(6, 6);
    for i in 0..2 {
        a[(i, 2 + i)] = 1.0;
        a[(2 + i, 4 + i)] = 1.0 / m;
        a[(4 + i, 4 + i)] = -1.0 / tau;
        for j in 0..2 {
            a[(2 + i, 2 + j)] = l[i][j] / m;
        }
        a[(2 + i, 2 + i)] -= b / m;
    }
    let mut bm = Matrix::zeros(6, 2);
    bm[(4, 0)] = 1.0 / tau;
    bm[(5, 1)] = 1.0 / tau;

    let (c1, c2) = (params.c1, params.c2);
    let g = if c1 == 0.0 && c2 == 0.0 {
        Vec::new()
    } else {
        vec![dmatrix![c1, 0.0; c2, 0.0], dmatrix![0.0, c2; 0.0, c1]]
    };
    let q = Matrix::from_diagonal(&Vector::from_row_slice(&params.q_diag));
    let r = Matrix::from_diagonal(&Vector::from_row_slice(&params.r_diag));
    let system = LinearStochasticSystem::new(a, bm, Vec::new(), g, q, r);
    let init = InitialStateSpec {
        mean: Vector::from_row_slice(&params.x0_mean),
        covariance: Matrix::from_diagonal(&Vector::from_row_slice(&params.x0_cov_diag)),
    };
    system.ensure_valid()?;
    Ok((system, init))
}

/// Matrices as JSON arrays of row arrays.
pub type Rows = Vec<Vec<f64>>;

/// Inline system definition as stored in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDocument {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "F", default)]
    pub f: Vec<Rows>,
    #[serde(rename = "G", default)]
    pub g: Vec<Rows>,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "R")]
    pub r: Rows,
    pub x0_mean: Vec<f64>,
    pub x0_cov: Rows,
}

/// Either an inline definition or a named preset with overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSource {
    Preset {
        preset: String,
        #[serde(default)]
        params: Option<ArmParams>,
    },
    Inline(SystemDocument),
}

pub fn matrix_from_rows(rows: &Rows, name: &str) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::Invalid(format!("{name} must be a non-empty matrix")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::Invalid(format!("{name}: row {i} has {} entries, expected {ncols}", rows[i].len())));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &Matrix) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl SystemDocument {
    pub fn build(&self) -> Result<(LinearStochasticSystem, InitialStateSpec)> {
        let f = self
            .f
            .iter()
            .enumerate()
            .map(|(i, rows)| matrix_from_rows(rows, &format!("F[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let g = self
            .g
            .iter()
            .enumerate()
            .map(|(i, rows)| matrix_from_rows(rows, &format!("G[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let system = LinearStochasticSystem::new(
            matrix_from_rows(&self.a, "A")?,
            matrix_from_rows(&self.b, "B")?,
            f,
            g,
            matrix_from_rows(&self.q, "Q")?,
            matrix_from_rows(&self.r, "R")?,
        );
        let init = InitialStateSpec {
            mean: Vector::from_vec(self.x0_mean.clone()),
            covariance: matrix_from_rows(&self.x0_cov, "x0_cov")?,
        };
        let mut diags = system.validate();
        diags.extend(validate_initial_state(&init, system.n()));
        if !diags.is_empty() {
            let joined: Vec<_> = diags.iter().map(|d| d.0.as_str()).collect();
            return Err(Error::Invalid(joined.join("; ")));
        }
        Ok((system, init))
    }

    pub fn from_system(system: &LinearStochasticSystem, init: &InitialStateSpec) -> Self {
        Self {
            a: matrix_to_rows(&system.a),
            b: matrix_to_rows(&system.b),
            f: system.f.iter().map(matrix_to_rows).collect(),
            g: system.g.iter().map(matrix_to_rows).collect(),
            q: matrix_to_rows(&system.q),
            r: matrix_to_rows(&system.r),
            x0_mean: init.mean.iter().copied().collect(),
            x0_cov: matrix_to_rows(&init.covariance),
        }
    }
}

impl SystemSource {
    pub fn build(&self) -> Result<(LinearStochasticSystem, InitialStateSpec)> {
        match self {
            SystemSource::Preset { preset, params } if preset == ARM_PRESET => {
                sensorimotor_arm(&params.clone().unwrap_or_default())
            }
            SystemSource::Preset { preset, .. } => Err(Error::Invalid(format!(
                "unknown system preset \"{preset}\" (available: {ARM_PRESET})"
            ))),
            SystemSource::Inline(doc) => doc.build(),
        }
    }
}

pub fn load_system_json(text: &str) -> Result<(LinearStochasticSystem, InitialStateSpec)> {
    let source: SystemSource = serde_json::from_str(text)?;
    source.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64, q: f64, r: f64) -> LinearStochasticSystem {
        LinearStochasticSystem::new(dmatrix![a], dmatrix![b], vec![], vec![], dmatrix![q], dmatrix![r])
    }

    #[test]
    fn minimal_scalar_is_valid() {
        assert!(scalar(-1.0, 1.0, 1.0, 1.0).validate().is_empty());
    }

    #[test]
    fn singular_r_is_reported() {
        let diags = scalar(-1.0, 1.0, 1.0, 0.0).validate();
        assert_eq!(diags, vec![Diagnostic("R not positive definite".into())]);
    }

    #[test]
    fn misshapen_noise_gain_is_reported() {
        let mut sys = LinearStochasticSystem::new(
            Matrix::identity(2, 2) * -1.0,
            Matrix::identity(2, 2),
            vec![Matrix::zeros(2, 3)],
            vec![],
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
        );
        let diags = sys.validate();
        assert_eq!(diags.len(), 1);
        assert!(diags[0].0.contains("F[0] must be 2x2"), "{diags:?}");
        sys.f.clear();
        sys.q[(0, 1)] = 1.0;
        assert_eq!(sys.validate(), vec![Diagnostic("Q not symmetric".into())]);
    }

    #[test]
    fn admissibility_scalar_examples() {
        let k0 = dmatrix![0.0];
        assert!(check_admissible(&scalar(-1.0, 1.0, 1.0, 1.0), &k0).unwrap().is_stable);
        assert!(!check_admissible(&scalar(1.0, 1.0, 1.0, 1.0), &k0).unwrap().is_stable);
        let report = check_admissible(&scalar(1.0, 1.0, 1.0, 1.0), &dmatrix![2.0]).unwrap();
        assert!(report.is_stable);
        assert!((report.spectral_abscissa + 2.0).abs() < 1e-12);
    }

    #[test]
    fn arm_shapes() {
        let (sys, init) = sensorimotor_arm(&ArmParams::default()).unwrap();
        assert_eq!((sys.n(), sys.m(), sys.q1(), sys.q2()), (6, 2, 0, 2));
        assert_eq!(init.dim(), 6);
        let quiet = ArmParams { c1: 0.0, c2: 0.0, ..ArmParams::default() };
        let (sys, _) = sensorimotor_arm(&quiet).unwrap();
        assert_eq!(sys.q2(), 0);
        assert!(sys.validate().is_empty());
    }

    #[test]
    fn arm_state_space_matches_hand_derivation() {
        let p = ArmParams {
            mass: 2.0,
            viscosity: 3.0,
            time_constant: 0.5,
            force_field: [[0.4, -0.6], [0.8, 1.0]],
            ..ArmParams::default()
        };
        let (sys, _) = sensorimotor_arm(&p).unwrap();
        // ṗ = v; v̇ = (a − b v + L v)/m; ȧ = (u − a)/τ.
        #[rustfmt::skip]
        let expected_a = Matrix::from_row_slice(6, 6, &[
            0.0, 0.0, 1.0,               0.0,               0.0,  0.0,
            0.0, 0.0, 0.0,               1.0,               0.0,  0.0,
            0.0, 0.0, (0.4 - 3.0) / 2.0, -0.6 / 2.0,        0.5,  0.0,
            0.0, 0.0, 0.8 / 2.0,         (1.0 - 3.0) / 2.0, 0.0,  0.5,
            0.0, 0.0, 0.0,               0.0,              -2.0,  0.0,
            0.0, 0.0, 0.0,               0.0,               0.0, -2.0,
        ]);
        assert!((&sys.a - expected_a).norm() < 1e-15);
        #[rustfmt::skip]
        let expected_b = Matrix::from_row_slice(6, 2, &[
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 2.0,
        ]);
        assert_eq!(sys.b, expected_b);
        assert_eq!(sys.g[0], dmatrix![p.c1, 0.0; p.c2, 0.0]);
        assert_eq!(sys.g[1], dmatrix![0.0, p.c2; 0.0, p.c1]);
    }

    #[test]
    fn arm_rejects_bad_params() {
        let bad_mass = ArmParams { mass: 0.0, ..ArmParams::default() };
        assert!(sensorimotor_arm(&bad_mass).is_err());
        let bad_tau = ArmParams { time_constant: -1.0, ..ArmParams::default() };
        assert!(sensorimotor_arm(&bad_tau).is_err());
    }

    #[test]
    fn json_inline_and_preset() {
        let text = r#"{"A": [[-1.0]], "B": [[1.0]], "F": [], "G": [[[1.0]]],
                       "Q": [[1.0]], "R": [[1.0]], "x0_mean": [0.0], "x0_cov": [[1.0]]}"#;
        let (sys, init) = load_system_json(text).unwrap();
        assert_eq!(sys.q2(), 1);
        assert_eq!(init.covariance, dmatrix![1.0]);

        let (arm, _) = load_system_json(r#"{"preset": "sensorimotor-arm", "params": {"c1": 0.1}}"#).unwrap();
        assert_eq!(arm.g[0][(0, 0)], 0.1);
        assert!(load_system_json(r#"{"preset": "pendulum"}"#).is_err());

        let bad = text.replace(r#""R": [[1.0]]"#, r#""R": [[0.0]]"#);
        let err = load_system_json(&bad).unwrap_err();
        assert!(err.to_string().contains("R not positive definite"), "{err}");
    }

    #[test]
    fn document_round_trip() {
        let (sys, init) = sensorimotor_arm(&ArmParams::default()).unwrap();
        let doc = SystemDocument::from_system(&sys, &init);
        let text = serde_json::to_string(&doc).unwrap();
        let (back, back_init) = load_system_json(&text).unwrap();
        assert_eq!(back, sys);
        assert_eq!(back_init, init);
    }
}
