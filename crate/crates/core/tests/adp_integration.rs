mod common;

use adp_core::adp::{self, run_adp, AdpConfig, SolveMode};
use adp_core::linops::Matrix;
use adp_core::model::{InitialStateSpec, LinearStochasticSystem};
use adp_core::riccati;
use adp_core::sde::{ExplorationSignal, SimulatedPlant};
use adp_core::Error;
use common::unit_initial;
use nalgebra::dmatrix;

fn two_state(noise: f64) -> LinearStochasticSystem {
    let (f, g) = if noise > 0.0 {
        (vec![dmatrix![noise, 0.0]], vec![dmatrix![noise]])
    } else {
        (Vec::new(), Vec::new())
    };
    LinearStochasticSystem::new(
        dmatrix![0.0, 1.0; -1.0, -0.5],
        dmatrix![0.0; 1.0],
        f,
        g,
        Matrix::identity(2, 2),
        dmatrix![1.0],
    )
}

fn config(h: f64, n_mc: usize, mode: SolveMode) -> AdpConfig {
    AdpConfig {
        h,
        delta_t: 0.1,
        intervals: Some(20),
        n_mc,
        batches: 4,
        max_iter: 10,
        tol: 1e-9,
        mode,
        explore: ExplorationSignal::default_for(1, 1.0),
        seed: 21,
    }
}

#[test]
fn noise_free_fine_grid_recovers_kleinman_solution() {
    let sys = two_state(0.0);
    let plant = SimulatedPlant::new(sys.clone(), unit_initial(2));
    let k0 = Matrix::zeros(1, 2);
    let sol = riccati::solve(&sys, &k0, 1e-14, 100).unwrap();
    let res = run_adp(&plant, &k0, &sys.q, &sys.r, &config(1e-4, 64, SolveMode::LeastSquares), Some(&sol.p_star), None).unwrap();
    assert!(res.converged);
    let err = (&res.p_final - &sol.p_star).norm();
    assert!(err < 2e-3, "error {err:.3e}");
    assert!((&res.k_final - &sol.k_star).norm() < 2e-3);
    assert_eq!(res.budget.n_mc, 64);
}

#[test]
fn solve_modes_agree_on_sampled_data() {
    let sys = two_state(0.2);
    let plant = SimulatedPlant::new(sys.clone(), unit_initial(2));
    let k0 = Matrix::zeros(1, 2);
    let ls = run_adp(&plant, &k0, &sys.q, &sys.r, &config(0.01, 100, SolveMode::LeastSquares), None, None).unwrap();
    let sym = run_adp(&plant, &k0, &sys.q, &sys.r, &config(0.01, 100, SolveMode::Symmetric), None, None).unwrap();
    let first = (&ls.iterates[0].step.p_hat - &sym.iterates[0].step.p_hat).norm();
    assert!(first < 1e-6 * ls.iterates[0].step.p_hat.norm(), "{first:.3e}");
}

#[test]
fn square_mode_uses_the_unknown_count() {
    let cfg = config(0.01, 10, SolveMode::Square);
    assert_eq!(cfg.resolved_intervals(2, 1), adp::full_unknowns(2, 1));
    // for n = m = 1 there is no symmetric redundancy and the square system is solvable
    let sys = LinearStochasticSystem::new(dmatrix![-1.0], dmatrix![1.0], vec![], vec![dmatrix![0.3]], dmatrix![1.0], dmatrix![1.0]);
    let plant = SimulatedPlant::new(sys.clone(), unit_initial(1));
    let res = run_adp(&plant, &dmatrix![0.0], &sys.q, &sys.r, &config(0.01, 200, SolveMode::Square), None, None).unwrap();
    assert_eq!(res.iterates[0].step.rank, 3);
}

#[test]
fn no_excitation_is_rank_deficient() {
    let sys = two_state(0.0);
    let plant = SimulatedPlant::new(sys.clone(), InitialStateSpec::zero_mean(Matrix::zeros(2, 2)));
    let mut cfg = config(0.01, 4, SolveMode::LeastSquares);
    cfg.explore = ExplorationSignal::zero();
    let err = run_adp(&plant, &Matrix::zeros(1, 2), &sys.q, &sys.r, &cfg, None, None).unwrap_err();
    assert!(matches!(err, Error::RankDeficient { .. }), "{err}");
}

#[test]
fn observer_sees_every_iterate_and_can_stop() {
    let sys = two_state(0.1);
    let plant = SimulatedPlant::new(sys.clone(), unit_initial(2));
    let mut seen = Vec::new();
    let mut observer = |it: &adp::AdpIterate| {
        seen.push(it.index);
        if it.index == 1 {
            Err(Error::Invalid("stop".into()))
        } else {
            Ok(())
        }
    };
    let out = run_adp(&plant, &Matrix::zeros(1, 2), &sys.q, &sys.r, &config(0.01, 20, SolveMode::LeastSquares), None, Some(&mut observer));
    assert!(out.is_err());
    assert_eq!(seen, vec![0, 1]);
}
