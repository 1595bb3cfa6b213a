//! Dense small-matrix helpers: Kronecker products, column-major
//! vectorization, generalized Lyapunov solves and mean-square stability.
//!
//! Everything here works on `DMatrix<f64>` and is sized for the problems in
//! this crate (state dimension up to a handful), so the Lyapunov operator is
//! assembled explicitly as an `n² × n²` matrix and factorized densely.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LinearStochasticSystem;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Condition numbers above this are treated as singular.
const SINGULAR_CONDITION: f64 = 1e14;

/// Verdict of [`mean_square_stability`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub is_stable: bool,
    /// Largest real part among the second-moment generator's eigenvalues.
    pub spectral_abscissa: f64,
}

impl StabilityReport {
    fn from_abscissa(spectral_abscissa: f64) -> Self {
        Self {
            is_stable: spectral_abscissa < 0.0,
            spectral_abscissa,
        }
    }
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Stacks the columns of `m` top to bottom.
pub fn vec(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::Dimension {
            context: "unvec",
            expected: format!("{} entries", rows * cols),
            got: format!("{} entries", v.len()),
        });
    }
    Ok(Matrix::from_column_slice(rows, cols, v.as_slice()))
}

pub fn symmetrize(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::NotSquare("symmetrize input"));
    }
    Ok((m + m.transpose()) * 0.5)
}

/// In-place variant used on hot paths where the input is known square.
pub(crate) fn symmetrize_mut(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.norm()
}

/// Ratio of extreme singular values; `inf` when the smallest is zero.
pub fn condition_number(m: &Matrix) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves the dense square system `op · x = rhs`, refusing operators whose
/// condition estimate exceeds `1e14`.
pub(crate) fn solve_dense(op: &Matrix, rhs: &Vector, context: &'static str) -> Result<Vector> {
    let condition = condition_number(op);
    if !condition.is_finite() || condition > SINGULAR_CONDITION {
        return Err(Error::Singular { context, condition });
    }
    op.clone()
        .lu()
        .solve(rhs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or(Error::Singular { context, condition })
}

/// Assembles `Iₙ⊗Mᵀ + Mᵀ⊗Iₙ + Σ_j N_jᵀ⊗N_jᵀ`, the vectorized form of
/// `P ↦ MᵀP + PM + Σ_j N_jᵀ P N_j`.
pub fn lyapunov_operator(m: &Matrix, noise_maps: &[Matrix]) -> Matrix {
    let n = m.nrows();
    let eye = Matrix::identity(n, n);
    let mt = m.transpose();
    let mut op = kron(&eye, &mt) + kron(&mt, &eye);
    for nj in noise_maps {
        let njt = nj.transpose();
        op += kron(&njt, &njt);
    }
    op
}

/// Solves `MᵀP + PM + Σ_j N_jᵀ P N_j + C = 0` for symmetric `P`.
pub fn solve_generalized_lyapunov(m: &Matrix, noise_maps: &[Matrix], c: &Matrix) -> Result<Matrix> {
    let n = m.nrows();
    if !m.is_square() {
        return Err(Error::NotSquare("Lyapunov drift matrix"));
    }
    if c.shape() != (n, n) {
        return Err(Error::Dimension {
            context: "Lyapunov constant term",
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", c.nrows(), c.ncols()),
        });
    }
    if let Some(bad) = noise_maps.iter().find(|nj| nj.shape() != (n, n)) {
        return Err(Error::Dimension {
            context: "Lyapunov noise map",
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", bad.nrows(), bad.ncols()),
        });
    }
    let op = lyapunov_operator(m, noise_maps);
    let rhs = -vec(c);
    let x = solve_dense(&op, &rhs, "generalized Lyapunov operator")?;
    let mut p = unvec(&x, n, n)?;
    symmetrize_mut(&mut p);
    Ok(p)
}

/// Residual `MᵀP + PM + Σ_j N_jᵀ P N_j + C`.
pub fn lyapunov_residual(m: &Matrix, noise_maps: &[Matrix], c: &Matrix, p: &Matrix) -> Matrix {
    let mut r = m.transpose() * p + p * m + c;
    for nj in noise_maps {
        r += nj.transpose() * p * nj;
    }
    r
}

/// Largest real part of the eigenvalues of a square matrix.
pub fn spectral_abscissa(m: &Matrix) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Generator `L` of `d vec(E[xxᵀ]) / dt = L vec(E[xxᵀ])` for the closed loop
/// `dx = M x dt + Σ_j N_j x dβ_j`.
pub fn second_moment_generator(closed_loop: &Matrix, noise_maps: &[Matrix]) -> Matrix {
    let n = closed_loop.nrows();
    let eye = Matrix::identity(n, n);
    let mut l = kron(&eye, closed_loop) + kron(closed_loop, &eye);
    for nj in noise_maps {
        l += kron(nj, nj);
    }
    l
}

/// Mean-square stability of `u = -Kx` applied to `system`.
pub fn mean_square_stability(system: &LinearStochasticSystem, k: &Matrix) -> Result<StabilityReport> {
    let (closed_loop, noise_maps) = system.closed_loop(k)?;
    let generator = second_moment_generator(&closed_loop, &noise_maps);
    Ok(StabilityReport::from_abscissa(spectral_abscissa(&generator)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn det_rng(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random(rows: usize, cols: usize, next: &mut impl FnMut() -> f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| next())
    }

    #[test]
    fn kron_identity_and_scalar() {
        let i2 = Matrix::identity(2, 2);
        assert_eq!(kron(&i2, &i2), Matrix::identity(4, 4));
        let s = dmatrix![2.0];
        let d = dmatrix![1.0, 0.0; 0.0, 3.0];
        assert_eq!(kron(&s, &d), dmatrix![2.0, 0.0; 0.0, 6.0]);
    }

    #[test]
    fn kron_matches_product_oracle() {
        let a = dmatrix![1.0, 2.0; 3.0, 4.0];
        let b = dmatrix![0.0, 1.0; 1.0, 0.0];
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (4, 4));
        let mut next = det_rng(7);
        for _ in 0..10 {
            let x = random(2, 2, &mut next);
            let lhs = &k * vec(&x);
            let rhs = vec(&(&b * &x * a.transpose()));
            assert!((lhs - rhs).norm() < 1e-14);
        }
    }

    #[test]
    fn vec_is_column_major() {
        let m = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert_eq!(vec(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(vec(&Matrix::zeros(3, 3)), Vector::zeros(9));
        assert!(unvec(&vec(&m), 3, 1).is_err());
    }

    #[test]
    fn symmetrize_examples() {
        let m = dmatrix![1.0, 2.0; 0.0, 1.0];
        assert_eq!(symmetrize(&m).unwrap(), dmatrix![1.0, 1.0; 1.0, 1.0]);
        let s = dmatrix![2.0, -1.0; -1.0, 5.0];
        assert_eq!(symmetrize(&s).unwrap(), s);
        assert!(symmetrize(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn symmetrize_distance_is_half_skew_norm() {
        // ‖sym(M) − M‖_F = ‖M − Mᵀ‖_F / 2 exactly.
        let mut next = det_rng(11);
        for _ in 0..50 {
            let m = random(4, 4, &mut next);
            let lhs = (symmetrize(&m).unwrap() - &m).norm();
            let rhs = (&m - m.transpose()).norm() / 2.0;
            assert!((lhs - rhs).abs() < 1e-14);
            let twice = symmetrize(&symmetrize(&m).unwrap()).unwrap();
            assert_eq!(twice, symmetrize(&m).unwrap());
        }
    }

    #[test]
    fn scalar_lyapunov_examples() {
        let m = dmatrix![-1.0];
        let c = dmatrix![1.0];
        let p = solve_generalized_lyapunov(&m, &[], &c).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
        let p = solve_generalized_lyapunov(&m, &[dmatrix![1.0]], &c).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_stable_lyapunov_residual() {
        let mut next = det_rng(3);
        let m = random(3, 3, &mut next) - Matrix::identity(3, 3) * 3.0;
        assert!(spectral_abscissa(&m) < 0.0);
        let c = Matrix::identity(3, 3);
        let p = solve_generalized_lyapunov(&m, &[], &c).unwrap();
        assert!(lyapunov_residual(&m, &[], &c, &p).norm() < 1e-9);
    }

    #[test]
    fn singular_operator_is_reported() {
        // M = 0 makes the operator identically zero.
        let err = solve_generalized_lyapunov(&Matrix::zeros(2, 2), &[], &Matrix::identity(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }), "{err}");
        assert!(err.to_string().contains("condition estimate"));
    }

    #[test]
    fn stability_scalar_examples() {
        let sys = |a: f64, b: f64, f: Option<f64>| {
            LinearStochasticSystem::new(
                dmatrix![a],
                dmatrix![b],
                f.map(|f| vec![dmatrix![f]]).unwrap_or_default(),
                vec![],
                dmatrix![1.0],
                dmatrix![1.0],
            )
        };
        let k0 = dmatrix![0.0];
        let r = mean_square_stability(&sys(-1.0, 0.0, None), &k0).unwrap();
        assert!(r.is_stable && (r.spectral_abscissa + 2.0).abs() < 1e-12);
        let r = mean_square_stability(&sys(1.0, 0.0, None), &k0).unwrap();
        assert!(!r.is_stable && (r.spectral_abscissa - 2.0).abs() < 1e-12);
        let r = mean_square_stability(&sys(-1.0, 1.0, Some(2f64.sqrt())), &k0).unwrap();
        assert!(r.spectral_abscissa.abs() < 1e-12);
        assert!(!r.is_stable);
        assert!(mean_square_stability(&sys(-1.0, 1.0, None), &dmatrix![1.0, 2.0]).is_err());
    }
}
