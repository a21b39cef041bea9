//! Properties of the exponential-tilting calibration solver.

mod common;

use common::binary_column_system;
use ipwcal::calibrate::{
    self, objective_grad_hess, SolveOptions, CONVERGENCE_TOL, MAX_ITERATIONS,
};
use ipwcal::restrictions::RestrictionSystem;
use ipwcal::rng::replicate_rng;
use ipwcal::simulate::{
    self, generate_cohort, CensoringScenario, CovariateSet, ScenarioConfig,
};
use ipwcal::weights::WeightMatrix;
use ndarray::Array1;
use rand::Rng as _;

/// A mid-sized study system with treatment, censoring, and (implicit)
/// normalization structure, together with its maximum-likelihood initial
/// weights over the system rows.
fn study_system(n: usize, seed: u64) -> (RestrictionSystem, Array1<f64>, WeightMatrix) {
    let mut config =
        ScenarioConfig::new(n, CensoringScenario::CovariateDependent, CovariateSet::Correct, seed);
    config.t = 4;
    let data = generate_cohort(&config).unwrap();
    let (initial, numerator) = simulate::initial_study_weights(
        &data,
        CensoringScenario::CovariateDependent,
        CovariateSet::Correct,
    )
    .unwrap();
    let rows = initial.defined_rows();
    let (system, _pruned) = simulate::study_restrictions(
        &data,
        &rows,
        &numerator,
        CensoringScenario::CovariateDependent,
        CovariateSet::Correct,
    )
    .unwrap();
    let w0 = initial.values_for(&system.row_index);
    (system, w0, initial)
}

#[test]
fn gradient_and_hessian_match_central_finite_differences() {
    let (system, w0, _) = study_system(60, 71);
    let k = &system.k;
    let l = &system.l;
    let r = system.r();
    let mut rng = replicate_rng(7100, 0);
    let h = 1e-6;
    for point in 0..10 {
        let lambda: Array1<f64> =
            (0..r).map(|_| rng.random_range(-0.05..0.05)).collect();
        let (_, grad, hess) = objective_grad_hess(&w0, k, l, &lambda).unwrap();
        let grad_scale = grad.iter().fold(1.0f64, |a, g| a.max(g.abs()));
        let hess_scale = hess.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for q in 0..r {
            let mut up = lambda.clone();
            let mut down = lambda.clone();
            up[q] += h;
            down[q] -= h;
            let (fu, gu, _) = objective_grad_hess(&w0, k, l, &up).unwrap();
            let (fd, gd, _) = objective_grad_hess(&w0, k, l, &down).unwrap();
            let fd_grad = (fu - fd) / (2.0 * h);
            assert!(
                (fd_grad - grad[q]).abs() <= 1e-6 * grad_scale,
                "point {point}, ∂/∂λ[{q}]: analytic {} vs finite difference {fd_grad}",
                grad[q]
            );
            for p in 0..r {
                let fd_hess = (gu[p] - gd[p]) / (2.0 * h);
                assert!(
                    (fd_hess - hess[[p, q]]).abs() <= 1e-4 * hess_scale,
                    "point {point}, ∂²/∂λ[{p}]∂λ[{q}]: analytic {} vs finite difference {fd_hess}",
                    hess[[p, q]]
                );
            }
        }
    }
}

#[test]
fn single_column_solutions_match_the_closed_form() {
    let mut rng = replicate_rng(7200, 0);
    for case in 0..8 {
        let m = 12;
        let ones: Vec<usize> = (0..m).filter(|_| rng.random::<f64>() < 0.6).collect();
        if ones.is_empty() {
            continue;
        }
        let w0: Array1<f64> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
        let covered: f64 = ones.iter().map(|&i| w0[i]).sum();
        let target = rng.random_range(0.5..6.0);
        let system = binary_column_system(m, &ones, target);
        // tighter than the default stopping rule so λ itself — not only the
        // residual — is pinned to closed-form accuracy
        let options = SolveOptions { tolerance: 1e-13, ..SolveOptions::default() };
        let solution = calibrate::solve(&w0, &system, &options).unwrap();
        let expected = (target / covered).ln();
        assert!(solution.converged, "case {case}: {solution:?}");
        assert!(
            (solution.lambda[0] - expected).abs() <= 1e-10 * expected.abs().max(1.0),
            "case {case}: λ = {} vs closed form {expected}",
            solution.lambda[0]
        );
        // the tilt moves exactly the covered rows, multiplicatively
        let tilt = solution.lambda[0].exp();
        let covered_after: f64 = ones.iter().map(|&i| w0[i] * tilt).sum();
        assert!((covered_after - target).abs() <= 1e-9 * target);
    }
}

#[test]
fn already_satisfied_restrictions_leave_the_weights_alone() {
    let (mut system, w0, initial) = study_system(40, 72);
    // retarget the system at the initial weights' own balance
    system.l = system.k.t().dot(&w0);
    let solution = calibrate::solve(&w0, &system, &SolveOptions::default()).unwrap();
    assert!(solution.converged);
    assert_eq!(solution.iterations, 0, "zero start already solves the system");
    assert!(solution.lambda.iter().all(|&v| v == 0.0));
    assert_eq!(solution.final_residual_inf, 0.0);

    let data_free_apply =
        calibrate::calibrate_weights(&dataset_for(&initial), &initial, &system, &SolveOptions::default())
            .unwrap();
    let (calibrated, _) = data_free_apply;
    for &(i, j) in &system.row_index {
        assert_eq!(calibrated.value(i, j), initial.value(i, j));
    }
}

/// Minimal dataset reconstruction for the `calibrate_weights` entry point
/// (which only uses the weight matrix's own geometry).
fn dataset_for(w: &WeightMatrix) -> ipwcal::dataset::LongitudinalDataset {
    use ipwcal::dataset::{from_columns, TreatmentKind};
    let n = w.n();
    let visits = w.t() + 1;
    from_columns(
        (0..n).map(|i| format!("s{i}")).collect(),
        visits,
        TreatmentKind::Ordinal3,
        vec![
            ("r".into(), vec![1.0; n * visits]),
            ("y".into(), vec![0.0; n * visits]),
            ("a0".into(), vec![0.0; n * visits]),
            ("a1".into(), vec![0.0; n * visits]),
        ],
    )
    .unwrap()
}

#[test]
fn the_minimizer_is_unique_regardless_of_start() {
    let (system, w0, _) = study_system(80, 73);
    let tight = SolveOptions { tolerance: 1e-12, ..SolveOptions::default() };
    let reference = calibrate::solve(&w0, &system, &tight).unwrap();
    assert!(reference.converged);
    let mut rng = replicate_rng(7300, 0);
    for start in 0..5 {
        let perturbed: Array1<f64> =
            (0..system.r()).map(|_| rng.random_range(-0.1..0.1)).collect();
        let options = SolveOptions { start: Some(perturbed), ..tight.clone() };
        let solution = calibrate::solve(&w0, &system, &options).unwrap();
        assert!(solution.converged, "start {start}: {solution:?}");
        let spread = solution
            .lambda
            .iter()
            .zip(reference.lambda.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(
            spread <= 1e-6,
            "start {start}: multipliers differ from the zero-start solution by {spread}"
        );
    }
}

#[test]
fn unreachable_targets_are_flagged_infeasible_without_panicking() {
    // A 0/1 column can never produce a negative balance from positive
    // weights: the objective is unbounded below and the solver must say so.
    let w0: Array1<f64> = Array1::from_vec(vec![1.0, 0.8, 1.2, 0.9]);
    let system = binary_column_system(4, &[0, 2], -1.0);
    let solution = calibrate::solve(&w0, &system, &SolveOptions::default()).unwrap();
    assert!(solution.infeasible, "{solution:?}");
    assert!(!solution.converged, "infeasible and converged are mutually exclusive");
    assert!(solution.lambda.iter().all(|v| v.is_finite()));
}

#[test]
fn calibration_preserves_positivity_and_the_defined_mask() {
    let (system, w0, initial) = study_system(120, 74);
    let solution = calibrate::solve(&w0, &system, &SolveOptions::default()).unwrap();
    assert!(solution.converged, "{solution:?}");
    let tilted = &w0 * &system.k.dot(&solution.lambda).mapv(f64::exp);
    let residual = system.residual(&tilted);
    let scale = system.l.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    assert!(
        residual.iter().all(|v| v.abs() <= CONVERGENCE_TOL * scale),
        "tilted weights must satisfy every restriction"
    );
    // the matrix-level application: positive everywhere defined, same mask
    let data = dataset_for(&initial);
    let (calibrated, _) =
        calibrate::calibrate_weights(&data, &initial, &system, &SolveOptions::default()).unwrap();
    for i in 0..initial.n() {
        for j in 1..=initial.t() {
            match initial.defined(i, j) {
                true => assert!(
                    calibrated.value(i, j) > 0.0,
                    "calibrated weight at ({i}, {j}) must stay positive"
                ),
                false => assert!(
                    !calibrated.defined(i, j),
                    "calibration must not invent weights at ({i}, {j})"
                ),
            }
        }
    }
}

#[test]
fn a_full_study_cohort_calibrates_within_the_iteration_budget() {
    let data = generate_cohort(&ScenarioConfig::new(
        500,
        CensoringScenario::CovariateDependent,
        CovariateSet::Correct,
        75,
    ))
    .unwrap();
    let (initial, numerator) = simulate::initial_study_weights(
        &data,
        CensoringScenario::CovariateDependent,
        CovariateSet::Correct,
    )
    .unwrap();
    let (calibrated, solution) = simulate::calibrated_study_weights(
        &data,
        &initial,
        &numerator,
        CensoringScenario::CovariateDependent,
        CovariateSet::Correct,
    )
    .unwrap();
    assert!(solution.converged);
    assert!(
        solution.iterations <= MAX_ITERATIONS / 2,
        "a well-posed study instance should converge in few Newton steps, took {}",
        solution.iterations
    );
    let rows = initial.defined_rows();
    assert!(rows.iter().all(|&(i, j)| calibrated.value(i, j) > 0.0));
    println!(
        "study calibration: {} restrictions, {} weights, {} iterations, residual {:.3e}",
        solution.lambda.len(),
        rows.len(),
        solution.iterations,
        solution.final_residual_inf
    );
}
