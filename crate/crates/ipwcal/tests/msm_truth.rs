//! Estimating-equation and bootstrap behavior of the marginal-model fit.

use ipwcal::calibrate::CONVERGENCE_TOL;
use ipwcal::design::build_design;
use ipwcal::msm::{self, MsmEstimate};
use ipwcal::simulate::{
    self, generate_cohort, CensoringScenario, CovariateSet, Estimator, ScenarioConfig,
    TRUE_GAMMA,
};
use ipwcal::weights::{self, Scaling};
use ipwcal::LongitudinalDataset;
use ndarray::Array1;

/// Prepared study cohort (derived columns appended) plus its
/// maximum-likelihood weights.
fn prepared_study_instance(
    n: usize,
    censoring: CensoringScenario,
    seed: u64,
) -> (LongitudinalDataset, weights::WeightMatrix, weights::TreatmentModel) {
    let mut config = ScenarioConfig::new(n, censoring, CovariateSet::Correct, seed);
    config.t = 5;
    let raw = generate_cohort(&config).unwrap();
    let analysis = simulate::study_analysis();
    let (data, _) = simulate::prepare_cohort(&raw, CovariateSet::Correct, &analysis).unwrap();
    let (initial, numerator) =
        simulate::initial_study_weights(&data, censoring, CovariateSet::Correct).unwrap();
    (data, initial, numerator)
}

/// Independent check that `Σ w·(y − Xβ̂)·X_q = 0` for every design column.
fn assert_weighted_orthogonality(
    data: &LongitudinalDataset,
    w: &weights::WeightMatrix,
    estimate: &MsmEstimate,
) {
    let analysis = simulate::study_analysis();
    let design = build_design(data, &analysis.msm.outcome_design, (1, data.t_max())).unwrap();
    let y = data.column("y").unwrap();
    let visits = data.visits();
    let y_scale = design
        .row_index
        .iter()
        .map(|&(i, j)| y[i * visits + j].abs())
        .fold(1.0f64, f64::max);
    for q in 0..design.ncols() {
        let mut moment = 0.0;
        let mut mass = 0.0;
        for (row, &(i, j)) in design.row_index.iter().enumerate() {
            let mut fitted = 0.0;
            for (p, c) in estimate.coefficients.iter().enumerate() {
                fitted += c * design.x[[row, p]];
            }
            let wij = w.value(i, j);
            moment += wij * (y[i * visits + j] - fitted) * design.x[[row, q]];
            mass += wij * design.x[[row, q]].abs();
        }
        let scale = mass.max(1.0) * y_scale;
        assert!(
            moment.abs() <= 1e-8 * scale,
            "weighted residual moment for '{}' is {moment} (scale {scale})",
            design.names[q]
        );
    }
}

#[test]
fn weighted_residuals_are_orthogonal_to_every_design_column() {
    let analysis = simulate::study_analysis();
    let (data, initial, numerator) =
        prepared_study_instance(200, CensoringScenario::CovariateDependent, 81);
    let mle = msm::fit_msm(&data, &analysis.msm, &initial).unwrap();
    assert_weighted_orthogonality(&data, &initial, &mle);

    let (calibrated, _) = simulate::calibrated_study_weights(
        &data,
        &initial,
        &numerator,
        CensoringScenario::CovariateDependent,
        CovariateSet::Correct,
    )
    .unwrap();
    let cmle = msm::fit_msm(&data, &analysis.msm, &calibrated).unwrap();
    assert_weighted_orthogonality(&data, &calibrated, &cmle);
}

#[test]
fn coefficients_are_invariant_to_global_weight_rescaling() {
    let analysis = simulate::study_analysis();
    let (data, initial, _) = prepared_study_instance(150, CensoringScenario::CovariateDependent, 82);
    let baseline = msm::fit_msm(&data, &analysis.msm, &initial).unwrap();
    let rescaled = weights::combine_and_scale(&initial, None, Scaling::TotalToNT).unwrap();
    // the rescaling is a genuine change of scale...
    let rows = initial.defined_rows();
    let ratio = rescaled.value(rows[0].0, rows[0].1) / initial.value(rows[0].0, rows[0].1);
    assert!((ratio - 1.0).abs() > 1e-6, "rescaling should change the weights (ratio {ratio})");
    // ...that every coefficient ignores
    let refit = msm::fit_msm(&data, &analysis.msm, &rescaled).unwrap();
    for (q, name) in baseline.names.iter().enumerate() {
        let a = baseline.coefficients[q];
        let b = refit.coefficients[q];
        assert!(
            (a - b).abs() <= 1e-10 * a.abs().max(1.0),
            "coefficient '{name}' moved under global rescaling: {a} vs {b}"
        );
    }
}

#[test]
fn calibration_zeroes_the_restriction_residuals_ml_weights_leave_behind() {
    let (data, initial, numerator) = prepared_study_instance(400, CensoringScenario::None, 83);
    let rows = initial.defined_rows();
    let (system, _) = simulate::study_restrictions(
        &data,
        &rows,
        &numerator,
        CensoringScenario::None,
        CovariateSet::Correct,
    )
    .unwrap();
    let scale = system.l.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let before = system.residual(&initial.values_for(&rows));
    let worst_before = before.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(
        worst_before > 1e-3 * scale,
        "maximum-likelihood weights should NOT already satisfy the balance restrictions \
         (worst residual {worst_before}, scale {scale})"
    );
    let (calibrated, solution) = simulate::calibrated_study_weights(
        &data,
        &initial,
        &numerator,
        CensoringScenario::None,
        CovariateSet::Correct,
    )
    .unwrap();
    assert!(solution.converged);
    let after = system.residual(&calibrated.values_for(&rows));
    let worst_after = after.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(
        worst_after <= CONVERGENCE_TOL * scale,
        "calibrated weights leave residual {worst_after} (scale {scale})"
    );
}

#[test]
fn true_generative_weights_recover_the_generative_effects() {
    // With the exact data-generating weights, the weighted outcome
    // regression is unbiased for the marginal effects: over 300 cohorts of
    // n = 2500 the mean estimate lands within 0.1 of the truth (about
    // three Monte Carlo standard errors).
    let analysis = simulate::study_analysis();
    let replicates = 300;
    let mut sums = vec![0.0f64; TRUE_GAMMA.len()];
    for rep in 0..replicates {
        let config = ScenarioConfig::new(
            2500,
            CensoringScenario::CovariateDependent,
            CovariateSet::Correct,
            9_000 + rep as u64,
        );
        let raw = generate_cohort(&config).unwrap();
        let (data, _) =
            simulate::prepare_cohort(&raw, CovariateSet::Correct, &analysis).unwrap();
        let truth_weights =
            simulate::generative_weights(&data, CensoringScenario::CovariateDependent).unwrap();
        let estimate = msm::fit_msm(&data, &analysis.msm, &truth_weights).unwrap();
        for (q, label) in analysis.msm.treatment_term_labels.iter().enumerate() {
            sums[q] += estimate.coefficient(label).unwrap();
        }
    }
    for (q, label) in analysis.msm.treatment_term_labels.iter().enumerate() {
        let bias = sums[q] / replicates as f64 - analysis.truth[q];
        assert!(
            bias.abs() <= 0.1,
            "estimator of '{label}' under true weights has Monte Carlo bias {bias}"
        );
    }
}

#[test]
fn bootstrap_results_do_not_depend_on_thread_count() {
    let mut config =
        ScenarioConfig::new(80, CensoringScenario::CovariateDependent, CovariateSet::Correct, 84);
    config.t = 4;
    let data = generate_cohort(&config).unwrap();
    let analysis = simulate::study_analysis();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            msm::bootstrap(&data, 24, 4200, |sample| {
                simulate::estimate_once(
                    sample,
                    CensoringScenario::CovariateDependent,
                    CovariateSet::Correct,
                    Estimator::Mle,
                    &analysis,
                )
            })
            .unwrap()
        })
    };
    let serial = run(1);
    let parallel = run(4);
    assert_eq!(serial.names, parallel.names);
    assert_eq!(serial.replicates_used, parallel.replicates_used);
    assert_eq!(serial.failed_replicates, parallel.failed_replicates);
    for q in 0..serial.se.len() {
        assert_eq!(
            serial.se[q].to_bits(),
            parallel.se[q].to_bits(),
            "standard error {q} differs between thread counts"
        );
    }
    for (a, b) in serial.estimates.iter().zip(parallel.estimates.iter()) {
        assert_eq!(a.to_bits(), b.to_bits(), "replicate estimates differ between thread counts");
    }
    assert!(serial.replicates_used > 0);
}

#[test]
fn bootstrap_tolerates_scattered_failures_but_aborts_on_widespread_ones() {
    let mut config =
        ScenarioConfig::new(60, CensoringScenario::None, CovariateSet::Correct, 85);
    config.t = 3;
    let data = generate_cohort(&config).unwrap();
    let analysis = simulate::study_analysis();
    let fit = |sample: &LongitudinalDataset| {
        simulate::estimate_once(
            sample,
            CensoringScenario::None,
            CovariateSet::Correct,
            Estimator::Mle,
            &analysis,
        )
    };

    // every replicate fails: the failure-rate guard must abort
    let all_fail = msm::bootstrap(&data, 10, 4300, |_sample| {
        Err(ipwcal::Error::numerical("injected failure"))
    });
    let message = all_fail.unwrap_err().to_string();
    assert!(
        message.contains("bootstrap aborted") && message.contains("injected failure"),
        "unexpected abort message: {message}"
    );

    // a deterministic data-dependent fault on a minority of resamples is
    // absorbed: failed replicates are excluded and reported
    let faulty = |sample: &LongitudinalDataset| {
        let treated_at_1 = (0..sample.n())
            .filter(|&i| sample.value("a0", i, 1).unwrap() == 1.0)
            .count();
        if treated_at_1 % 10 == 0 {
            return Err(ipwcal::Error::numerical("synthetic minority fault"));
        }
        fit(sample)
    };
    let summary = msm::bootstrap(&data, 40, 4400, faulty).unwrap();
    assert!(
        summary.failed_replicates > 0,
        "the frozen seed should trip the synthetic fault at least once"
    );
    assert!(summary.failure_rate() <= msm::MAX_FAILURE_RATE);
    assert_eq!(summary.replicates_used + summary.failed_replicates, 40);
    assert_eq!(summary.failures.len(), summary.failed_replicates);
    for (k, message) in &summary.failures {
        assert!(*k < 40);
        assert!(message.contains("synthetic minority fault"));
    }
    assert_eq!(summary.estimates.nrows(), summary.replicates_used);

    // attaching to a fitted model carries the replicate accounting along
    let baseline = {
        let (prepared, _) =
            simulate::prepare_cohort(&data, CovariateSet::Correct, &analysis).unwrap();
        let (initial, _) = simulate::initial_study_weights(
            &prepared,
            CensoringScenario::None,
            CovariateSet::Correct,
        )
        .unwrap();
        msm::fit_msm(&prepared, &analysis.msm, &initial).unwrap()
    };
    let with_se = baseline.with_bootstrap(&summary).unwrap();
    assert_eq!(with_se.replicates_used, summary.replicates_used);
    assert_eq!(with_se.failed_replicates, summary.failed_replicates);
    let se = with_se.bootstrap_se.as_ref().unwrap();
    assert!(se.iter().all(|v| v.is_finite() && *v > 0.0));

    // mean of iid draws: the bootstrap standard error of a plain average
    // tracks s/√n (weights all one, intercept-only regression)
    let mean_only = |sample: &LongitudinalDataset| -> ipwcal::Result<MsmEstimate> {
        let n = sample.n();
        let values: Vec<f64> =
            (0..n).map(|i| sample.value("y", i, 1).unwrap()).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        Ok(MsmEstimate {
            names: vec!["mean".into()],
            coefficients: Array1::from_vec(vec![mean]),
            bootstrap_se: None,
            replicates_used: 0,
            failed_replicates: 0,
        })
    };
    let summary = msm::bootstrap(&data, 400, 4500, mean_only).unwrap();
    let n = data.n();
    let values: Vec<f64> = (0..n).map(|i| data.value("y", i, 1).unwrap()).collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd =
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let expected = sd / (n as f64).sqrt();
    assert!(
        (summary.se[0] - expected).abs() <= 0.15 * expected,
        "bootstrap SE of a plain mean: {} vs s/√n = {expected}",
        summary.se[0]
    );
}
