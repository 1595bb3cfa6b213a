#![allow(dead_code)]

use adp_core::linops::Matrix;
use adp_core::model::{check_admissible, InitialStateSpec, LinearStochasticSystem};
use nalgebra::dmatrix;

/// Small deterministic generator for test fixtures, uniform on [-1, 1).
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    pub fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.next())
    }
}

/// Random system with Hurwitz `A`, `q1 = q2 = 1` noise of size `noise`,
/// `Q = I`, `R = I`, and `K = 0` mean-square admissible.
pub fn random_stable(seed: u64, n: usize, m: usize, noise: f64) -> LinearStochasticSystem {
    let mut rng = Lcg::new(seed);
    loop {
        let raw = rng.matrix(n, n);
        let shift = raw.norm() + 0.5;
        let a = raw - Matrix::identity(n, n) * shift;
        let b = rng.matrix(n, m);
        let f = vec![rng.matrix(m, n) * noise];
        let g = vec![rng.matrix(m, m) * noise];
        let sys = LinearStochasticSystem::new(a, b, f, g, Matrix::identity(n, n), Matrix::identity(m, m));
        if check_admissible(&sys, &Matrix::zeros(m, n)).map(|r| r.is_stable).unwrap_or(false) {
            return sys;
        }
    }
}

pub fn scalar(a: f64, b: f64, f: Option<f64>, g: Option<f64>) -> LinearStochasticSystem {
    LinearStochasticSystem::new(
        dmatrix![a],
        dmatrix![b],
        f.map(|v| vec![dmatrix![v]]).unwrap_or_default(),
        g.map(|v| vec![dmatrix![v]]).unwrap_or_default(),
        dmatrix![1.0],
        dmatrix![1.0],
    )
}

pub fn unit_initial(n: usize) -> InitialStateSpec {
    InitialStateSpec::zero_mean(Matrix::identity(n, n))
}

/// Largest elementwise difference relative to the largest entry of `reference`.
pub fn max_rel_diff(a: &Matrix, reference: &Matrix) -> f64 {
    let scale = reference.amax().max(f64::MIN_POSITIVE);
    (a - reference).amax() / scale
}
