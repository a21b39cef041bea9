//! Synthetic longitudinal cohorts and the weighting replication study.
//!
//! The generator produces an ordinal-treatment cohort with four
//! time-varying confounders, optional covariate-dependent dropout, and a
//! linear outcome whose causal contrasts have known values, so estimator
//! error can be measured exactly. The study harness runs the full pipeline
//! — weight-model fitting, weight construction, optional calibration, and
//! the outcome regression — on many independently generated cohorts and
//! tabulates bias, standard deviation, and root-mean-squared error per
//! estimator and coefficient.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use std::io::Write as IoWrite;
use std::path::Path;

use crate::calibrate::{self, CalibrationSolution, SolveOptions};
use crate::dataset::{from_columns, Derivation, LongitudinalDataset, TreatmentKind};
use crate::design::DesignSpec;
use crate::error::{Error, Result};
use crate::msm::{fit_msm, MsmEstimate, MsmSpec};
use crate::restrictions::{self, CensoringTarget, PruneReport, RestrictionSystem};
use crate::rng;
use crate::weights::{
    self, Provenance, Scaling, TreatmentModel, TreatmentSpecs, WeightKind, WeightMatrix,
};

/// Baseline level of the generated outcome.
const OUTCOME_INTERCEPT: f64 = 200.0;
/// Slope tying the outcome to current treatment and recent covariates.
const OUTCOME_SLOPE: f64 = 5.0;
/// Default standard deviation of the outcome noise.
pub const DEFAULT_OUTCOME_SD: f64 = 20.0;
/// True values of the cumulative-exposure contrasts in [`study_analysis`]'s
/// marginal model, implied by the generative outcome equation.
pub const TRUE_GAMMA: [f64; 2] = [10.0, 20.0];

/// Which dropout mechanism the generator applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CensoringScenario {
    /// Everyone completes follow-up.
    None,
    /// Retention depends on lagged treatment and covariates, so complete
    /// cases are a biased sample.
    CovariateDependent,
}

impl CensoringScenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            CensoringScenario::None => "none",
            CensoringScenario::CovariateDependent => "covariate_dependent",
        }
    }

    /// Accepts the names or the conventional study numbers 1 (no
    /// censoring) and 2 (covariate-dependent censoring).
    pub fn parse(s: &str) -> Result<CensoringScenario> {
        Ok(match s {
            "none" | "1" => CensoringScenario::None,
            "covariate_dependent" | "2" => CensoringScenario::CovariateDependent,
            other => {
                return Err(Error::validation(format!(
                    "unknown censoring scenario '{other}' (expected 'none'/'1' or 'covariate_dependent'/'2')"
                )))
            }
        })
    }
}

/// Which covariate set the weight models and restrictions use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateSet {
    /// The confounders as generated: models are correctly specified.
    Correct,
    /// Deliberately distorted transforms of the confounders: models are
    /// misspecified in functional form.
    Transformed,
}

impl CovariateSet {
    pub fn as_str(&self) -> &'static str {
        match self {
            CovariateSet::Correct => "correct",
            CovariateSet::Transformed => "transformed",
        }
    }

    pub fn parse(s: &str) -> Result<CovariateSet> {
        Ok(match s {
            "correct" => CovariateSet::Correct,
            "transformed" => CovariateSet::Transformed,
            other => {
                return Err(Error::validation(format!(
                    "unknown covariate set '{other}' (expected 'correct' or 'transformed')"
                )))
            }
        })
    }
}

/// Full configuration of one study scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    /// Subjects per generated cohort.
    pub n: usize,
    /// Follow-up visits after baseline.
    pub t: usize,
    pub censoring: CensoringScenario,
    pub covariates: CovariateSet,
    pub seed: u64,
    /// Cohorts generated by [`run_study`].
    pub replicates: usize,
    /// Standard deviation of the outcome noise ε.
    pub outcome_sd: f64,
}

impl ScenarioConfig {
    /// A config with the study defaults: 10 follow-up visits, one
    /// replicate, outcome noise standard deviation 20.
    pub fn new(
        n: usize,
        censoring: CensoringScenario,
        covariates: CovariateSet,
        seed: u64,
    ) -> ScenarioConfig {
        ScenarioConfig {
            n,
            t: 10,
            censoring,
            covariates,
            seed,
            replicates: 1,
            outcome_sd: DEFAULT_OUTCOME_SD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::validation(format!(
                "scenario needs at least 2 subjects (got {})",
                self.n
            )));
        }
        if self.t < 1 {
            return Err(Error::validation("scenario needs at least 1 follow-up visit"));
        }
        if !(self.outcome_sd > 0.0) || !self.outcome_sd.is_finite() {
            return Err(Error::validation(format!(
                "outcome noise standard deviation must be positive (got {})",
                self.outcome_sd
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.n,
            "t": self.t,
            "censoring": self.censoring.as_str(),
            "covariates": self.covariates.as_str(),
            "seed": self.seed,
            "replicates": self.replicates,
            "outcome_noise_sd": self.outcome_sd,
            // The generator's outcome-noise parameter is a standard
            // deviation; recorded so downstream readers need not guess.
            "outcome_noise_interpretation": "standard_deviation",
        })
    }
}

fn bernoulli(rng: &mut rng::Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Generate one cohort.
///
/// Baseline (visit 0): `a0 ~ Bernoulli(0.5)`; `a1 | a0 = 1 ~
/// Bernoulli(0.5)`, else 0; latent `z1..z4` standard normal; `x1 = u·z1`,
/// `x2 = u·z2` with `u = 1 − 0.3(a0 + a1)`; `x3 = z3 + 0.5·cum`, `x4 = z4
/// + 0.5·cum` with `cum = Σ_{t≤j}(a0_t + a1_t)`.
///
/// Follow-up visit `j = 1..T`: retention is certain under
/// [`CensoringScenario::None`]; otherwise `logit pr(r_j = 1 | r_{j−1} = 1)
/// = 1 + a0_{j−1} + a1_{j−1} + 0.5x_{j−1,1} + 0.5x_{j−1,2} + 0.2x_{j−1,3}
/// + 0.2x_{j−1,4}`, and a dropout blanks every later field while `r` stays
/// 0. Treatment: `logit p_j = a0_{j−1} + a1_{j−1} + 0.5x_{j−1,1} +
/// 0.5x_{j−1,2} − 0.2x_{j−1,3} − 0.2x_{j−1,4}`; `a0_j ~ Bernoulli(p_j)`
/// and `a1_j | a0_j = 1 ~ Bernoulli(p_j)`. Covariates update as at
/// baseline. Outcome: `y_j = 200 + 5(a0_j + a1_j + Σ_{t=j−1}^{j} Σ_l
/// x_{t,l}) + ε_j` with `ε_j ~ N(0, outcome_sd²)`; the baseline outcome
/// uses the same form with only the visit-0 covariates (no model ever
/// consumes it, but observed records must be complete).
///
/// Draws consume one RNG stream in a fixed order (per subject: baseline
/// `a0`, conditional `a1`, `z1..z4`, `ε`; per follow-up visit: retention
/// when censoring is on, `a0`, conditional `a1`, `z1..z4`, `ε`), so a
/// fixed seed reproduces the dataset exactly.
pub fn generate_cohort(config: &ScenarioConfig) -> Result<LongitudinalDataset> {
    config.validate()?;
    let n = config.n;
    let visits = config.t + 1;
    let mut rng = rng::replicate_rng(config.seed, 0);

    let mut r = vec![f64::NAN; n * visits];
    let mut a0 = vec![f64::NAN; n * visits];
    let mut a1 = vec![f64::NAN; n * visits];
    let mut x = [
        vec![f64::NAN; n * visits],
        vec![f64::NAN; n * visits],
        vec![f64::NAN; n * visits],
        vec![f64::NAN; n * visits],
    ];
    let mut y = vec![f64::NAN; n * visits];

    let draw_z = |rng: &mut rng::Rng| -> [f64; 4] {
        [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ]
    };

    for i in 0..n {
        let base = i * visits;

        let a0_now = bernoulli(&mut rng, 0.5);
        let a1_now = if a0_now == 1.0 { bernoulli(&mut rng, 0.5) } else { 0.0 };
        let mut cum = a0_now + a1_now;
        let u = 1.0 - 0.3 * (a0_now + a1_now);
        let z = draw_z(&mut rng);
        let x_now = [u * z[0], u * z[1], z[2] + 0.5 * cum, z[3] + 0.5 * cum];
        let eps: f64 = StandardNormal.sample(&mut rng);
        r[base] = 1.0;
        a0[base] = a0_now;
        a1[base] = a1_now;
        for l in 0..4 {
            x[l][base] = x_now[l];
        }
        y[base] = OUTCOME_INTERCEPT
            + OUTCOME_SLOPE * (a0_now + a1_now + x_now.iter().sum::<f64>())
            + config.outcome_sd * eps;

        let mut prev_a = (a0_now, a1_now);
        let mut prev_x = x_now;
        for j in 1..=config.t {
            if config.censoring == CensoringScenario::CovariateDependent {
                let eta = 1.0
                    + prev_a.0
                    + prev_a.1
                    + 0.5 * prev_x[0]
                    + 0.5 * prev_x[1]
                    + 0.2 * prev_x[2]
                    + 0.2 * prev_x[3];
                if rng.random::<f64>() >= crate::glm::expit(eta) {
                    for cell in base + j..base + visits {
                        r[cell] = 0.0;
                    }
                    break;
                }
            }
            r[base + j] = 1.0;

            let eta = prev_a.0 + prev_a.1 + 0.5 * prev_x[0] + 0.5 * prev_x[1]
                - 0.2 * prev_x[2]
                - 0.2 * prev_x[3];
            let p = crate::glm::expit(eta);
            let a0_now = bernoulli(&mut rng, p);
            let a1_now = if a0_now == 1.0 { bernoulli(&mut rng, p) } else { 0.0 };
            cum += a0_now + a1_now;
            let u = 1.0 - 0.3 * (a0_now + a1_now);
            let z = draw_z(&mut rng);
            let x_now = [u * z[0], u * z[1], z[2] + 0.5 * cum, z[3] + 0.5 * cum];
            let eps: f64 = StandardNormal.sample(&mut rng);
            a0[base + j] = a0_now;
            a1[base + j] = a1_now;
            for l in 0..4 {
                x[l][base + j] = x_now[l];
            }
            let recent: f64 = prev_x.iter().sum::<f64>() + x_now.iter().sum::<f64>();
            y[base + j] = OUTCOME_INTERCEPT
                + OUTCOME_SLOPE * (a0_now + a1_now + recent)
                + config.outcome_sd * eps;

            prev_a = (a0_now, a1_now);
            prev_x = x_now;
        }
    }

    let [x1, x2, x3, x4] = x;
    // canonical column order (r, y, treatment, covariates): a written cohort
    // reloads and rewrites byte-identically
    from_columns(
        (1..=n).map(|i| i.to_string()).collect(),
        visits,
        TreatmentKind::Ordinal3,
        vec![
            ("r".into(), r),
            ("y".into(), y),
            ("a0".into(), a0),
            ("a1".into(), a1),
            ("x1".into(), x1),
            ("x2".into(), x2),
            ("x3".into(), x3),
            ("x4".into(), x4),
        ],
    )
}

/// Append distorted covariate columns `x1t..x4t`, keeping the originals.
///
/// `x1t = x1³/9`, `x2t = x1·x2`, `x3t = log|x3| + 4`, `x4t = expit(x4)`.
/// A value `x3 = 0` exactly would be a log singularity; it is replaced by
/// `log(1e-300) + 4` and counted in the returned tally (a probability-zero
/// event under the generator, but possible in externally supplied data).
pub fn misspecify_transform(
    data: &LongitudinalDataset,
) -> Result<(LongitudinalDataset, usize)> {
    let x1 = data.column("x1")?.to_vec();
    let x2 = data.column("x2")?.to_vec();
    let x3 = data.column("x3")?.to_vec();
    let x4 = data.column("x4")?.to_vec();
    let mut singular = 0usize;

    let x1t: Vec<f64> = x1.iter().map(|v| v * v * v / 9.0).collect();
    let x2t: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a * b).collect();
    let x3t: Vec<f64> = x3
        .iter()
        .map(|v| {
            if *v == 0.0 {
                singular += 1;
                1e-300f64.ln() + 4.0
            } else {
                v.abs().ln() + 4.0
            }
        })
        .collect();
    let x4t: Vec<f64> = x4.iter().map(|v| crate::glm::expit(*v)).collect();

    let mut out = data.clone();
    out.add_column("x1t", x1t)?;
    out.add_column("x2t", x2t)?;
    out.add_column("x3t", x3t)?;
    out.add_column("x4t", x4t)?;
    Ok((out, singular))
}

/// The exact per-(subject, visit) inverse-probability weights implied by
/// the generative mechanism itself, with no model fitting: each visit
/// contributes `1/pr(observed treatment | history)` computed from the
/// generator's treatment equation, and under
/// [`CensoringScenario::CovariateDependent`] also `1/pr(still observed |
/// history)` from its retention equation. These unstabilized true weights
/// are an oracle for identification checks: reweighting by them must
/// recover the causal contrasts without estimation error beyond sampling
/// noise.
pub fn generative_weights(
    data: &LongitudinalDataset,
    censoring: CensoringScenario,
) -> Result<WeightMatrix> {
    let t = data.t_max();
    let n = data.n();
    let visits = data.visits();
    let r = data.column("r")?;
    let a0 = data.column("a0")?;
    let a1 = data.column("a1")?;
    let x1 = data.column("x1")?;
    let x2 = data.column("x2")?;
    let x3 = data.column("x3")?;
    let x4 = data.column("x4")?;

    let mut factors = vec![f64::NAN; n * t];
    let mut mask = vec![0u8; n * t];
    for i in 0..n {
        for j in 1..=t {
            let now = i * visits + j;
            let prev = now - 1;
            if r[now] != 1.0 {
                break;
            }
            let lag = (a0[prev], a1[prev], x1[prev], x2[prev], x3[prev], x4[prev]);
            let p = crate::glm::expit(
                lag.0 + lag.1 + 0.5 * lag.2 + 0.5 * lag.3 - 0.2 * lag.4 - 0.2 * lag.5,
            );
            let pr_a0 = if a0[now] == 1.0 { p } else { 1.0 - p };
            let pr_a1 = if a0[now] == 1.0 {
                if a1[now] == 1.0 {
                    p
                } else {
                    1.0 - p
                }
            } else {
                1.0
            };
            let mut factor = 1.0 / (pr_a0 * pr_a1);
            if censoring == CensoringScenario::CovariateDependent {
                let q = crate::glm::expit(
                    1.0 + lag.0 + lag.1 + 0.5 * lag.2 + 0.5 * lag.3 + 0.2 * lag.4 + 0.2 * lag.5,
                );
                factor /= q;
            }
            factors[i * t + j - 1] = factor;
            mask[i * t + j - 1] = 1;
        }
    }
    WeightMatrix::from_factors(
        n,
        t,
        factors,
        mask,
        WeightKind::Joint,
        Provenance {
            models: vec!["generative-truth".into()],
            scaling: None,
            clamped_rows: 0,
            notes: vec!["unstabilized inverse probabilities from the generating mechanism".into()],
        },
    )
}

/// Estimators compared by the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Maximum-likelihood weights used as-is.
    Mle,
    /// Maximum-likelihood weights calibrated to the balance restrictions.
    Cmle,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Mle => "mle",
            Estimator::Cmle => "cmle",
        }
    }

    pub fn parse(s: &str) -> Result<Estimator> {
        Ok(match s {
            "mle" => Estimator::Mle,
            "cmle" => Estimator::Cmle,
            other => {
                return Err(Error::validation(format!(
                    "unknown estimator '{other}' (expected 'mle' or 'cmle')"
                )))
            }
        })
    }
}

/// The analysis run on every replicated cohort: derived columns, the
/// marginal model, and the true values of its treatment coefficients.
#[derive(Debug, Clone)]
pub struct StudyAnalysis {
    /// Columns derived before fitting (e.g. cumulative exposure
    /// regressors).
    pub derive: Vec<Derivation>,
    pub msm: MsmSpec,
    /// True coefficient values aligned with
    /// `msm.treatment_term_labels`.
    pub truth: Vec<f64>,
}

/// The study's marginal model: mean outcome linear in the cumulative
/// any-treatment-minus-intensified contrast (`cumdiff`) and the cumulative
/// intensified exposure (`cuma1`), both summed from baseline. The
/// generative outcome equation gives these contrasts the values
/// [`TRUE_GAMMA`].
pub fn study_analysis() -> StudyAnalysis {
    StudyAnalysis {
        derive: vec![
            Derivation::Combination {
                name: "a01diff".into(),
                terms: vec![(1.0, "a0".into()), (-1.0, "a1".into())],
            },
            Derivation::Cumsum { name: "cumdiff".into(), source: "a01diff".into() },
            Derivation::Cumsum { name: "cuma1".into(), source: "a1".into() },
        ],
        msm: MsmSpec {
            outcome_design: DesignSpec::new("1 + cumdiff + cuma1", "y"),
            treatment_term_labels: vec!["cumdiff".into(), "cuma1".into()],
        },
        truth: TRUE_GAMMA.to_vec(),
    }
}

/// History-only formula for the stabilizing treatment-weight numerator.
pub const NUMERATOR_FORMULA: &str = "1 + a0 @ 1 + a1 @ 1";

fn covariate_columns(set: CovariateSet) -> [&'static str; 4] {
    match set {
        CovariateSet::Correct => ["x1", "x2", "x3", "x4"],
        CovariateSet::Transformed => ["x1t", "x2t", "x3t", "x4t"],
    }
}

/// Treatment-denominator formula: history plus the four lagged covariates.
pub fn denominator_formula(set: CovariateSet) -> String {
    let c = covariate_columns(set);
    format!("1 + a0 @ 1 + a1 @ 1 + {} @ 1 + {} @ 1 + {} @ 1 + {} @ 1", c[0], c[1], c[2], c[3])
}

/// Retention-model formula: visit indicators plus the six lagged main
/// effects (the visit indicators play the per-visit normalization role
/// when censoring restrictions are imposed).
pub fn censoring_formula(set: CovariateSet) -> String {
    let c = covariate_columns(set);
    format!(
        "1 + visit + a0 @ 1 + a1 @ 1 + {} @ 1 + {} @ 1 + {} @ 1 + {} @ 1",
        c[0], c[1], c[2], c[3]
    )
}

/// Prepare a cohort for analysis: append the transformed covariates when
/// the study uses them, then the analysis's derived columns. Idempotent:
/// existing columns are kept as-is. Returns the prepared dataset and the
/// count of log-singularity substitutions in the transform.
pub fn prepare_cohort(
    data: &LongitudinalDataset,
    covariates: CovariateSet,
    analysis: &StudyAnalysis,
) -> Result<(LongitudinalDataset, usize)> {
    let (mut work, singular) = match covariates {
        CovariateSet::Correct => (data.clone(), 0),
        CovariateSet::Transformed => {
            if data.has_column("x1t") {
                (data.clone(), 0)
            } else {
                misspecify_transform(data)?
            }
        }
    };
    work.apply_derivations(&analysis.derive)?;
    Ok((work, singular))
}

/// Maximum-likelihood initial weights for one cohort: stabilized treatment
/// weights times unstabilized censoring weights when dropout is part of
/// the design. Also returns the fitted history-only numerator model, which
/// the balance restrictions reuse.
pub fn initial_study_weights(
    data: &LongitudinalDataset,
    censoring: CensoringScenario,
    covariates: CovariateSet,
) -> Result<(WeightMatrix, TreatmentModel)> {
    let numerator =
        weights::fit_treatment_model(data, &TreatmentSpecs::ordinal(NUMERATOR_FORMULA))?;
    let denominator =
        weights::fit_treatment_model(data, &TreatmentSpecs::ordinal(&denominator_formula(covariates)))?;
    let treatment = weights::treatment_weights(data, &numerator, &denominator)?;
    let initial = match censoring {
        CensoringScenario::None => treatment,
        CensoringScenario::CovariateDependent => {
            let retention = weights::fit_censoring_model(
                data,
                &DesignSpec::new(&censoring_formula(covariates), "r"),
            )?;
            let censor = weights::censoring_weights(data, &retention, None)?;
            weights::combine_and_scale(&treatment, Some(&censor), Scaling::None)?
        }
    };
    Ok((initial, numerator))
}

/// The balance restrictions the study imposes on the initial weights:
/// treatment-score balance probed by the denominator design, plus either
/// per-visit normalization (no censoring) or retention balance probed by
/// the retention design (which subsumes normalization through its visit
/// indicators).
pub fn study_restrictions(
    data: &LongitudinalDataset,
    rows: &[(usize, usize)],
    numerator: &TreatmentModel,
    censoring: CensoringScenario,
    covariates: CovariateSet,
) -> Result<(RestrictionSystem, PruneReport)> {
    let probe = denominator_formula(covariates);
    let mut systems = vec![restrictions::ordinal_treatment_restrictions(
        data,
        rows,
        numerator,
        &probe,
        Some(&probe),
    )?];
    match censoring {
        CensoringScenario::None => {
            systems.push(restrictions::normalization_restrictions(rows, true))
        }
        CensoringScenario::CovariateDependent => {
            systems.push(restrictions::censoring_restrictions(
                data,
                rows,
                &censoring_formula(covariates),
                CensoringTarget::Repeated,
                None,
            )?)
        }
    }
    restrictions::assemble_joint(&systems, true)
}

/// Calibrate the study's initial weights; a solver that ends infeasible or
/// unconverged is an error (the replicate is then reported failed).
pub fn calibrated_study_weights(
    data: &LongitudinalDataset,
    initial: &WeightMatrix,
    numerator: &TreatmentModel,
    censoring: CensoringScenario,
    covariates: CovariateSet,
) -> Result<(WeightMatrix, CalibrationSolution)> {
    let rows = initial.defined_rows();
    let (system, _pruned) = study_restrictions(data, &rows, numerator, censoring, covariates)?;
    let (calibrated, solution) =
        calibrate::calibrate_weights(data, initial, &system, &SolveOptions::default())?;
    if solution.infeasible {
        return Err(Error::numerical(format!(
            "weight calibration is infeasible after {} iterations (residual {:.3e})",
            solution.iterations, solution.final_residual_inf
        )));
    }
    if !solution.converged {
        return Err(Error::numerical(format!(
            "weight calibration did not converge after {} iterations (residual {:.3e})",
            solution.iterations, solution.final_residual_inf
        )));
    }
    Ok((calibrated, solution))
}

/// Run one estimator on one cohort, end to end: prepare, fit the weight
/// models, build (and for [`Estimator::Cmle`] calibrate) the weights, and
/// fit the marginal model. This is the unit of work a bootstrap replicate
/// repeats on resampled data.
pub fn estimate_once(
    data: &LongitudinalDataset,
    censoring: CensoringScenario,
    covariates: CovariateSet,
    estimator: Estimator,
    analysis: &StudyAnalysis,
) -> Result<MsmEstimate> {
    let (work, _singular) = prepare_cohort(data, covariates, analysis)?;
    let (initial, numerator) = initial_study_weights(&work, censoring, covariates)?;
    match estimator {
        Estimator::Mle => fit_msm(&work, &analysis.msm, &initial),
        Estimator::Cmle => {
            let (calibrated, _solution) =
                calibrated_study_weights(&work, &initial, &numerator, censoring, covariates)?;
            fit_msm(&work, &analysis.msm, &calibrated)
        }
    }
}

/// One row of the study summary.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub estimator: Estimator,
    pub coefficient: String,
    pub truth: f64,
    /// Mean of estimate − truth over successful replicates.
    pub bias: f64,
    /// Sample standard deviation of the estimate over successful
    /// replicates.
    pub sd: f64,
    /// `√(bias² + sd²)`.
    pub rmse: f64,
    pub replicates_used: usize,
}

/// A failed replicate, attributed to the estimator whose pipeline failed
/// (a generation failure is charged to every requested estimator).
#[derive(Debug, Clone)]
pub struct StudyFailure {
    pub replicate: usize,
    pub estimator: Estimator,
    pub message: String,
}

/// Aggregated study results.
#[derive(Debug, Clone)]
pub struct StudySummary {
    pub config: ScenarioConfig,
    pub rows: Vec<StudyRow>,
    pub failures: Vec<StudyFailure>,
    /// Log-singularity substitutions made by the covariate transform,
    /// summed over replicates.
    pub transform_singularities: usize,
}

impl StudySummary {
    pub fn row(&self, estimator: Estimator, coefficient: &str) -> Option<&StudyRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.coefficient == coefficient)
    }

    pub fn write_csv<W: IoWrite>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["estimator", "coefficient", "truth", "bias", "sd", "rmse", "replicates_used"])
            .map_err(csv_err)?;
        for row in &self.rows {
            w.write_record([
                row.estimator.as_str(),
                &row.coefficient,
                &format!("{}", row.truth),
                &format!("{}", row.bias),
                &format!("{}", row.sd),
                &format!("{}", row.rmse),
                &row.replicates_used.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_csv(file)
    }

    /// A fixed-width text table of the summary rows.
    pub fn format_table(&self) -> String {
        let label_width = self
            .rows
            .iter()
            .map(|r| r.coefficient.len())
            .chain(["coefficient".len()])
            .max()
            .unwrap_or(11);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:<label_width$} {:>9} {:>9} {:>9} {:>9} {:>6}\n",
            "estimator", "coefficient", "truth", "bias", "sd", "rmse", "used"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:<label_width$} {:>9.3} {:>9.4} {:>9.4} {:>9.4} {:>6}\n",
                r.estimator.as_str(),
                r.coefficient,
                r.truth,
                r.bias,
                r.sd,
                r.rmse,
                r.replicates_used
            ));
        }
        if !self.failures.is_empty() {
            out.push_str(&format!("failed replicates: {}\n", self.failures.len()));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config.to_json(),
            "rows": self
                .rows
                .iter()
                .map(|r| serde_json::json!({
                    "estimator": r.estimator.as_str(),
                    "coefficient": r.coefficient,
                    "truth": r.truth,
                    "bias": r.bias,
                    "sd": r.sd,
                    "rmse": r.rmse,
                    "replicates_used": r.replicates_used,
                }))
                .collect::<Vec<_>>(),
            "failures": self
                .failures
                .iter()
                .map(|f| serde_json::json!({
                    "replicate": f.replicate,
                    "estimator": f.estimator.as_str(),
                    "error": f.message,
                }))
                .collect::<Vec<_>>(),
            "transform_singularities": self.transform_singularities,
        })
    }
}

struct ReplicateOutcome {
    singularities: usize,
    /// Estimated treatment coefficients per estimator, or the failure
    /// message.
    results: Vec<(Estimator, std::result::Result<Vec<f64>, String>)>,
}

fn run_replicate(
    config: &ScenarioConfig,
    estimators: &[Estimator],
    analysis: &StudyAnalysis,
) -> ReplicateOutcome {
    let labels = &analysis.msm.treatment_term_labels;
    let gammas = |estimate: &MsmEstimate| -> std::result::Result<Vec<f64>, String> {
        labels
            .iter()
            .map(|l| {
                estimate
                    .coefficient(l)
                    .ok_or_else(|| format!("coefficient '{l}' missing from the fit"))
            })
            .collect()
    };

    let shared = (|| -> Result<_> {
        let raw = generate_cohort(config)?;
        let (work, singularities) = prepare_cohort(&raw, config.covariates, analysis)?;
        let (initial, numerator) =
            initial_study_weights(&work, config.censoring, config.covariates)?;
        Ok((work, initial, numerator, singularities))
    })();

    let (work, initial, numerator, singularities) = match shared {
        Ok(parts) => parts,
        Err(e) => {
            let message = e.to_string();
            return ReplicateOutcome {
                singularities: 0,
                results: estimators.iter().map(|&est| (est, Err(message.clone()))).collect(),
            };
        }
    };

    let results = estimators
        .iter()
        .map(|&est| {
            let fit = match est {
                Estimator::Mle => fit_msm(&work, &analysis.msm, &initial),
                Estimator::Cmle => calibrated_study_weights(
                    &work,
                    &initial,
                    &numerator,
                    config.censoring,
                    config.covariates,
                )
                .and_then(|(calibrated, _)| fit_msm(&work, &analysis.msm, &calibrated)),
            };
            (est, fit.map_err(|e| e.to_string()).and_then(|f| gammas(&f)))
        })
        .collect();

    ReplicateOutcome { singularities, results }
}

/// Run the replication study: generate `config.replicates` cohorts, fit
/// every requested estimator on each, and aggregate the treatment
/// coefficients' bias, standard deviation, and root-mean-squared error
/// against the analysis's true values.
///
/// Replicate `k` draws its cohort from a seed derived from `(config.seed,
/// k)`, so results are identical however replicates are scheduled. Failed
/// replicates are excluded from the aggregates and reported in the
/// summary; an estimator with fewer than two successes is an error.
pub fn run_study(
    config: &ScenarioConfig,
    estimators: &[Estimator],
    analysis: &StudyAnalysis,
) -> Result<StudySummary> {
    config.validate()?;
    if config.replicates < 2 {
        return Err(Error::validation(format!(
            "a study needs at least 2 replicates (got {})",
            config.replicates
        )));
    }
    if estimators.is_empty() {
        return Err(Error::validation("no estimators requested"));
    }
    for (k, est) in estimators.iter().enumerate() {
        if estimators[..k].contains(est) {
            return Err(Error::validation(format!(
                "estimator '{}' listed twice",
                est.as_str()
            )));
        }
    }
    let labels = &analysis.msm.treatment_term_labels;
    if analysis.truth.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} true values supplied for {} treatment terms",
            analysis.truth.len(),
            labels.len()
        )));
    }

    let outcomes: Vec<ReplicateOutcome> = (0..config.replicates)
        .into_par_iter()
        .map(|k| {
            let mut replicate_config = config.clone();
            replicate_config.seed = rng::substream_seed(config.seed, 1 + k as u64);
            run_replicate(&replicate_config, estimators, analysis)
        })
        .collect();

    let mut failures: Vec<StudyFailure> = Vec::new();
    let mut rows: Vec<StudyRow> = Vec::new();
    let transform_singularities = outcomes.iter().map(|o| o.singularities).sum();

    for &est in estimators {
        let mut estimates: Vec<Vec<f64>> = Vec::new();
        for (k, outcome) in outcomes.iter().enumerate() {
            let (_, result) = outcome
                .results
                .iter()
                .find(|(e, _)| *e == est)
                .expect("every replicate reports every estimator");
            match result {
                Ok(gamma) => estimates.push(gamma.clone()),
                Err(message) => failures.push(StudyFailure {
                    replicate: k,
                    estimator: est,
                    message: message.clone(),
                }),
            }
        }
        let used = estimates.len();
        if used < 2 {
            let first = failures
                .iter()
                .find(|f| f.estimator == est)
                .map(|f| format!("replicate {}: {}", f.replicate, f.message))
                .unwrap_or_else(|| "no failure recorded".into());
            return Err(Error::numerical(format!(
                "estimator '{}': only {used} of {} replicates succeeded; first failure: {first}",
                est.as_str(),
                config.replicates
            )));
        }
        for (q, label) in labels.iter().enumerate() {
            let truth = analysis.truth[q];
            let mean = estimates.iter().map(|g| g[q]).sum::<f64>() / used as f64;
            let ss: f64 = estimates.iter().map(|g| (g[q] - mean) * (g[q] - mean)).sum();
            let sd = (ss / (used - 1) as f64).sqrt();
            let bias = mean - truth;
            rows.push(StudyRow {
                estimator: est,
                coefficient: label.clone(),
                truth,
                bias,
                sd,
                rmse: (bias * bias + sd * sd).sqrt(),
                replicates_used: used,
            });
        }
    }

    failures.sort_by_key(|f| (f.replicate, f.estimator.as_str()));
    Ok(StudySummary { config: config.clone(), rows, failures, transform_singularities })
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse(format!("csv write failed: {e}"))
}
