//! Model-based ground truth for the generalized Riccati equation
//!
//! ```text
//! 𝒯_P = AᵀP + PA − PB(Σ_P + R)⁻¹BᵀP + Π_P + Q = 0
//! Π_P = Σᵢ FᵢᵀBᵀPBFᵢ,   Σ_P = Σᵢ GᵢᵀBᵀPBGᵢ
//! ```
//!
//! Two independent routes are provided: Kleinman-style policy iteration
//! (one generalized Lyapunov solve per step) and Newton's method on `𝒯`
//! through its Fréchet differential. [`perturbed_iterate`] adds a caller
//! chosen error to each Newton step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{self, Matrix, Vector};
use crate::model::LinearStochasticSystem;
use crate::rng::{NormalStream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub p_star: Matrix,
    pub k_star: Matrix,
    pub iterations: usize,
    /// `‖𝒯_{P*}‖_F`.
    pub final_residual: f64,
    pub history: Vec<PiIterate>,
}

/// One iterate `(P_k, K_k)` of an exact or perturbed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiIterate {
    pub index: usize,
    pub p: Matrix,
    pub k: Matrix,
    /// `‖𝒯_{P_k}‖_F`.
    pub residual: f64,
    pub injected_error_norm: f64,
}

/// `Σ_P = Σᵢ GᵢᵀBᵀPBGᵢ` (m × m).
pub fn sigma_of(system: &LinearStochasticSystem, p: &Matrix) -> Matrix {
    let btpb = system.b.transpose() * p * &system.b;
    let m = system.m();
    system
        .g
        .iter()
        .fold(Matrix::zeros(m, m), |acc, gi| acc + gi.transpose() * &btpb * gi)
}

/// `Π_P = Σᵢ FᵢᵀBᵀPBFᵢ` (n × n).
pub fn pi_of(system: &LinearStochasticSystem, p: &Matrix) -> Matrix {
    let btpb = system.b.transpose() * p * &system.b;
    let n = system.n();
    system
        .f
        .iter()
        .fold(Matrix::zeros(n, n), |acc, fi| acc + fi.transpose() * &btpb * fi)
}

fn check_square_state(system: &LinearStochasticSystem, p: &Matrix, name: &'static str) -> Result<()> {
    let n = system.n();
    if p.shape() != (n, n) {
        return Err(Error::Dimension {
            context: name,
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", p.nrows(), p.ncols()),
        });
    }
    Ok(())
}

/// `(Σ_P + R)⁻¹`.
fn weighted_input_inverse(system: &LinearStochasticSystem, p: &Matrix) -> Result<Matrix> {
    let s = sigma_of(system, p) + &system.r;
    let condition = linops::condition_number(&s);
    if !condition.is_finite() || condition > 1e14 {
        return Err(Error::Singular {
            context: "Sigma_P + R",
            condition,
        });
    }
    s.try_inverse().ok_or(Error::Singular {
        context: "Sigma_P + R",
        condition,
    })
}

/// Policy improvement `K = (Σ_P + R)⁻¹BᵀP`.
pub fn gain_from(system: &LinearStochasticSystem, p: &Matrix) -> Result<Matrix> {
    check_square_state(system, p, "value matrix")?;
    Ok(weighted_input_inverse(system, p)? * system.b.transpose() * p)
}

/// The Riccati operator `𝒯_P`, symmetrized.
pub fn op_t(system: &LinearStochasticSystem, p: &Matrix) -> Result<Matrix> {
    check_square_state(system, p, "value matrix")?;
    let inv = weighted_input_inverse(system, p)?;
    let pb = p * &system.b;
    let mut t = system.a.transpose() * p + p * &system.a - &pb * inv * pb.transpose() + pi_of(system, p) + &system.q;
    linops::symmetrize_mut(&mut t);
    Ok(t)
}

/// Fréchet differential `𝒯'_P W`:
///
/// ```text
/// AᵀW + WA + Π_W − WB(Σ_P+R)⁻¹BᵀP − PB(Σ_P+R)⁻¹BᵀW
///   + PB(Σ_P+R)⁻¹Σ_W(Σ_P+R)⁻¹BᵀP
/// ```
pub fn frechet_apply(system: &LinearStochasticSystem, p: &Matrix, w: &Matrix) -> Result<Matrix> {
    check_square_state(system, p, "value matrix")?;
    check_square_state(system, w, "direction")?;
    let inv = weighted_input_inverse(system, p)?;
    Ok(frechet_with_inverse(system, p, w, &inv))
}

fn frechet_with_inverse(system: &LinearStochasticSystem, p: &Matrix, w: &Matrix, inv: &Matrix) -> Matrix {
    let b = &system.b;
    let bt = b.transpose();
    let pb = p * b;
    let wb = w * b;
    system.a.transpose() * w + w * &system.a + pi_of(system, w)
        - &wb * inv * &bt * p
        - &pb * inv * &bt * w
        + &pb * inv * sigma_of(system, w) * inv * pb.transpose()
}

/// Matrix of `W ↦ 𝒯'_P W` acting on `vec(W)` (n² × n²).
pub fn frechet_operator(system: &LinearStochasticSystem, p: &Matrix) -> Result<Matrix> {
    check_square_state(system, p, "value matrix")?;
    let n = system.n();
    let inv = weighted_input_inverse(system, p)?;
    let mut op = Matrix::zeros(n * n, n * n);
    let mut basis = Matrix::zeros(n, n);
    for col in 0..n * n {
        let (i, j) = (col % n, col / n);
        basis[(i, j)] = 1.0;
        let image = frechet_with_inverse(system, p, &basis, &inv);
        op.set_column(col, &linops::vec(&image));
        basis[(i, j)] = 0.0;
    }
    Ok(op)
}

/// `Ψ_P = P − (𝒯'_P)⁻¹ 𝒯_P`, computed by solving `𝒯'_P X = 𝒯'_P P − 𝒯_P`.
/// `iteration` only labels errors.
pub fn newton_step(system: &LinearStochasticSystem, p: &Matrix, iteration: usize) -> Result<Matrix> {
    let wrap = |e: Error| Error::NewtonStep {
        iteration,
        reason: e.to_string(),
    };
    let op = frechet_operator(system, p).map_err(wrap)?;
    let t = op_t(system, p).map_err(wrap)?;
    let rhs: Vector = &op * linops::vec(p) - linops::vec(&t);
    let x = linops::solve_dense(&op, &rhs, "Frechet differential").map_err(wrap)?;
    let mut next = linops::unvec(&x, system.n(), system.n())?;
    linops::symmetrize_mut(&mut next);
    Ok(next)
}

/// Policy evaluation and improvement for gain `K_k`: solves
///
/// ```text
/// (A−BK)ᵀP + P(A−BK) + Q + Π_P + Kᵀ(Σ_P+R)K = 0
/// ```
///
/// as one generalized Lyapunov equation with noise maps `{BFᵢ, BGᵢK}` and
/// returns `(P_k, K_{k+1})`.
pub fn kleinman_step(system: &LinearStochasticSystem, k: &Matrix) -> Result<(Matrix, Matrix)> {
    let (closed, maps) = system.closed_loop(k)?;
    let report = linops::mean_square_stability(system, k)?;
    if !report.is_stable {
        return Err(Error::NotAdmissible {
            abscissa: report.spectral_abscissa,
        });
    }
    let c = &system.q + k.transpose() * &system.r * k;
    let p = linops::solve_generalized_lyapunov(&closed, &maps, &c)?;
    let min_eig = p.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-10 * (1.0 + p.norm()) {
        return Err(Error::NotAdmissible {
            abscissa: report.spectral_abscissa,
        });
    }
    let next = gain_from(system, &p)?;
    Ok((p, next))
}

/// Kleinman iteration from an admissible `K0` until
/// `‖P_{k+1} − P_k‖_F ≤ tol·(1 + ‖P_k‖_F)`.
pub fn solve(system: &LinearStochasticSystem, k0: &Matrix, tol: f64, max_iter: usize) -> Result<RiccatiSolution> {
    system.check_gain(k0)?;
    let report = linops::mean_square_stability(system, k0)?;
    if !report.is_stable {
        return Err(Error::NotAdmissible {
            abscissa: report.spectral_abscissa,
        });
    }
    let mut history = Vec::new();
    let mut k = k0.clone();
    let mut prev: Option<Matrix> = None;
    let mut last_step = f64::INFINITY;
    for index in 0..max_iter {
        let (p, next) = kleinman_step(system, &k)?;
        let residual = op_t(system, &p)?.norm();
        history.push(PiIterate {
            index,
            p: p.clone(),
            k: k.clone(),
            residual,
            injected_error_norm: 0.0,
        });
        if let Some(prev) = prev.as_ref() {
            last_step = (&p - prev).norm() / (1.0 + prev.norm());
            if last_step <= tol {
                let k_star = gain_from(system, &p)?;
                return Ok(RiccatiSolution {
                    p_star: p,
                    k_star,
                    iterations: index + 1,
                    final_residual: residual,
                    history,
                });
            }
        }
        prev = Some(p);
        k = next;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_step,
    })
}

/// Source of the injected error `E_k` in `P̂_{k+1} = Ψ_{P̂_k} + E_k`.
pub trait ErrorGenerator {
    fn error(&mut self, iteration: usize, n: usize) -> Matrix;
}

impl<F: FnMut(usize, usize) -> Matrix> ErrorGenerator for F {
    fn error(&mut self, iteration: usize, n: usize) -> Matrix {
        self(iteration, n)
    }
}

/// Random symmetric errors of fixed Frobenius norm; the direction sequence
/// depends only on the seed, so two magnitudes share directions.
#[derive(Debug, Clone)]
pub struct RandomSymmetricError {
    pub magnitude: f64,
    pub seed: u64,
}

impl RandomSymmetricError {
    pub fn direction(seed: u64, iteration: usize, n: usize) -> Matrix {
        let stream = NormalStream::new(seed, iteration as u64, Stream::Perturbation);
        let mut z = vec![0.0; n * n];
        stream.fill(0, &mut z);
        let raw = Matrix::from_column_slice(n, n, &z);
        let sym = (&raw + raw.transpose()) * 0.5;
        let norm = sym.norm();
        sym / norm
    }
}

impl ErrorGenerator for RandomSymmetricError {
    fn error(&mut self, iteration: usize, n: usize) -> Matrix {
        Self::direction(self.seed, iteration, n) * self.magnitude
    }
}

/// `Ψ_{P̂_k} + E_k` with `E_k` symmetrized.
pub fn perturbed_iterate<G: ErrorGenerator + ?Sized>(
    system: &LinearStochasticSystem,
    p_hat: &Matrix,
    iteration: usize,
    generator: &mut G,
) -> Result<(Matrix, f64)> {
    let base = newton_step(system, p_hat, iteration)?;
    let e = linops::symmetrize(&generator.error(iteration, system.n()))?;
    let norm = e.norm();
    Ok((base + e, norm))
}

/// Runs `iterations` perturbed Newton steps from `p0`.
pub fn perturbed_newton<G: ErrorGenerator + ?Sized>(
    system: &LinearStochasticSystem,
    p0: &Matrix,
    iterations: usize,
    generator: &mut G,
) -> Result<Vec<PiIterate>> {
    let mut out = Vec::with_capacity(iterations + 1);
    let mut p = p0.clone();
    out.push(PiIterate {
        index: 0,
        k: gain_from(system, &p)?,
        residual: op_t(system, &p)?.norm(),
        p: p.clone(),
        injected_error_norm: 0.0,
    });
    for index in 0..iterations {
        let (next, injected) = perturbed_iterate(system, &p, index, generator)?;
        p = next;
        out.push(PiIterate {
            index: index + 1,
            k: gain_from(system, &p)?,
            residual: op_t(system, &p)?.norm(),
            p: p.clone(),
            injected_error_norm: injected,
        });
    }
    Ok(out)
}

/// Empirical local Lipschitz constant of `Ψ` around `center`: the largest
/// `‖Ψ_P − Ψ_P'‖_F / ‖P − P'‖_F` over `samples` random symmetric pairs
/// within Frobenius distance `radius`.
pub fn contraction_estimate(
    system: &LinearStochasticSystem,
    center: &Matrix,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let n = system.n();
    let mut worst: f64 = 0.0;
    for s in 0..samples {
        let d1 = RandomSymmetricError::direction(seed, 2 * s, n);
        let d2 = RandomSymmetricError::direction(seed, 2 * s + 1, n);
        // radii in (0, radius], varying with the sample index
        let r1 = radius * (0.25 + 0.75 * ((s * 7 + 3) % 11) as f64 / 10.0);
        let r2 = radius * (0.25 + 0.75 * ((s * 5 + 1) % 11) as f64 / 10.0);
        let p = center + d1 * r1;
        let q = center + d2 * r2;
        let num = (newton_step(system, &p, s)? - newton_step(system, &q, s)?).norm();
        let den = (&p - &q).norm();
        if den > 0.0 {
            worst = worst.max(num / den);
        }
    }
    Ok(worst)
}

/// Stabilizing solution of the deterministic CARE
/// `AᵀX + XA − XBR⁻¹BᵀX + Q = 0` via the matrix sign function of the
/// Hamiltonian. Independent of the Lyapunov-based iterations above.
pub fn care(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let r_inv = r.clone().try_inverse().ok_or(Error::Singular {
        context: "R",
        condition: linops::condition_number(r),
    })?;
    let s = b * r_inv * b.transpose();
    let mut z = Matrix::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(a);
    z.view_mut((0, n), (n, n)).copy_from(&(-&s));
    z.view_mut((n, 0), (n, n)).copy_from(&(-q));
    z.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut converged = false;
    for _ in 0..100 {
        let inv = z.clone().try_inverse().ok_or(Error::Singular {
            context: "Hamiltonian sign iteration",
            condition: f64::INFINITY,
        })?;
        let det = z.clone().lu().determinant().abs();
        let scale = if det > 0.0 && det.is_finite() {
            det.powf(-1.0 / (2.0 * n as f64))
        } else {
            1.0
        };
        let next = (&z * scale + inv / scale) * 0.5;
        let delta = (&next - &z).norm() / next.norm();
        z = next;
        if delta < 1e-14 {
            converged = true;
            break;
        }
    }
    if !converged && z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NoConvergence {
            iterations: 100,
            last_step: f64::NAN,
        });
    }
    // sign(H)·[I; X] = −[I; X]  ⇒  [W12; W22 + I] X = −[W11 + I; W21]
    let eye = Matrix::identity(n, n);
    let mut lhs = Matrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = Matrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(z.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    let x = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Invalid(format!("CARE least-squares solve failed: {e}")))?;
    linops::symmetrize(&x)
}

/// Deterministic LQR gain for `(A, B, Q, R)` with the noise removed, checked
/// for mean-square admissibility on the noisy system.
pub fn default_initial_gain(system: &LinearStochasticSystem) -> Result<Matrix> {
    let x = care(&system.a, &system.b, &system.q, &system.r)?;
    let k = system
        .r
        .clone()
        .try_inverse()
        .ok_or(Error::Invalid("R is singular".into()))?
        * system.b.transpose()
        * x;
    let report = linops::mean_square_stability(system, &k)?;
    if !report.is_stable {
        return Err(Error::NotAdmissible {
            abscissa: report.spectral_abscissa,
        });
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn scalar(g: Option<f64>) -> LinearStochasticSystem {
        LinearStochasticSystem::new(
            dmatrix![-1.0],
            dmatrix![1.0],
            vec![],
            g.map(|v| vec![dmatrix![v]]).unwrap_or_default(),
            dmatrix![1.0],
            dmatrix![1.0],
        )
    }

    #[test]
    fn riccati_operator_scalar() {
        // 2aP − P²b²/r + q = −2 − 1 + 1
        let t = op_t(&scalar(None), &dmatrix![1.0]).unwrap();
        assert!((t[(0, 0)] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn sigma_and_pi_examples() {
        let sys = scalar(None);
        assert_eq!(sigma_of(&sys, &dmatrix![3.0]), dmatrix![0.0]);
        assert_eq!(sigma_of(&scalar(Some(1.0)), &dmatrix![2.0]), dmatrix![2.0]);
        assert_eq!(pi_of(&sys, &dmatrix![3.0]), dmatrix![0.0]);
    }

    #[test]
    fn frechet_scalar_calculus() {
        // 𝒯'_P W = (−2 − 2P)W in the deterministic scalar case.
        let sys = scalar(None);
        let d = frechet_apply(&sys, &dmatrix![1.0], &dmatrix![1.0]).unwrap();
        assert!((d[(0, 0)] + 4.0).abs() < 1e-14);
        let zero = frechet_apply(&sys, &dmatrix![1.0], &dmatrix![0.0]).unwrap();
        assert_eq!(zero, dmatrix![0.0]);
    }

    #[test]
    fn newton_fixed_points_scalar() {
        let p_det = 2f64.sqrt() - 1.0;
        let p = newton_step(&scalar(None), &dmatrix![p_det], 0).unwrap();
        assert!((p[(0, 0)] - p_det).abs() < 1e-15);
        let p_noisy = (13f64.sqrt() - 1.0) / 6.0;
        let p = newton_step(&scalar(Some(1.0)), &dmatrix![p_noisy], 0).unwrap();
        assert!((p[(0, 0)] - p_noisy).abs() < 1e-15);
    }

    #[test]
    fn kleinman_scalar_first_step() {
        let (p0, k1) = kleinman_step(&scalar(None), &dmatrix![0.0]).unwrap();
        assert!((p0[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((k1[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kleinman_rejects_inadmissible_gain() {
        let mut sys = scalar(None);
        sys.a = dmatrix![1.0];
        assert!(matches!(kleinman_step(&sys, &dmatrix![0.0]), Err(Error::NotAdmissible { .. })));
        assert!(solve(&sys, &dmatrix![0.0], 1e-12, 20).is_err());
    }

    #[test]
    fn care_scalar() {
        let x = care(&dmatrix![-1.0], &dmatrix![1.0], &dmatrix![1.0], &dmatrix![1.0]).unwrap();
        assert!((x[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-13);
        // open-loop unstable
        let x = care(&dmatrix![1.0], &dmatrix![1.0], &dmatrix![1.0], &dmatrix![1.0]).unwrap();
        assert!((x[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-13);
    }

    #[test]
    fn zero_error_generator_matches_newton() {
        let sys = scalar(Some(0.5));
        let p = dmatrix![0.7];
        let mut zero = |_: usize, n: usize| Matrix::zeros(n, n);
        let (pert, norm) = perturbed_iterate(&sys, &p, 0, &mut zero).unwrap();
        assert_eq!(norm, 0.0);
        assert_eq!(pert, newton_step(&sys, &p, 0).unwrap());
    }

    #[test]
    fn random_error_has_requested_norm() {
        let mut generator = RandomSymmetricError { magnitude: 0.3, seed: 4 };
        let e = generator.error(2, 3);
        assert!((e.norm() - 0.3).abs() < 1e-14);
        assert_eq!(e, e.transpose());
    }
}
