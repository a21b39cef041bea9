//! Marginal structural model estimation.
//!
//! The outcome model regresses the observed responses at visits `1..=T` on
//! functions of treatment history (e.g. cumulative exposure columns) plus
//! nuisance terms, weighting each subject-visit row by its estimated
//! weight. With an identity link and a working-independence variance the
//! weighted estimating equations `Σ_ij w_ij x_ij (y_ij − x_ijᵀb) = 0`
//! reduce to weighted least squares, which is what [`fit_msm`] solves.
//! Standard errors come from a nonparametric bootstrap that resamples
//! whole subject trajectories and reruns the entire estimation pipeline —
//! model fits, weight construction, calibration, and the outcome
//! regression — on every replicate.

use std::io::Write as IoWrite;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rayon::prelude::*;

use crate::dataset::LongitudinalDataset;
use crate::design::{build_design, response_values, DesignSpec};
use crate::error::{Error, Result};
use crate::weights::WeightMatrix;
use crate::{glm, linalg, rng};

/// Largest tolerated share of failed bootstrap replicates; above this the
/// bootstrap aborts instead of reporting standard errors from the
/// survivors.
pub const MAX_FAILURE_RATE: f64 = 0.2;

/// The outcome model specification.
#[derive(Debug, Clone)]
pub struct MsmSpec {
    /// Design for the outcome regression (response `y`). Treatment-history
    /// columns (typically derived cumulative-sum columns) carry the causal
    /// contrasts; the rest are nuisance terms such as the intercept, visit
    /// indicators, or baseline covariates. Treatment columns must evaluate
    /// to zero on an untreated history so that the nuisance part alone
    /// describes the never-treated mean.
    pub outcome_design: DesignSpec,
    /// Names of the design columns whose coefficients are the treatment
    /// effects of interest.
    pub treatment_term_labels: Vec<String>,
}

/// A fitted marginal structural model.
#[derive(Debug, Clone)]
pub struct MsmEstimate {
    /// Coefficient names, in design-column order.
    pub names: Vec<String>,
    pub coefficients: Array1<f64>,
    /// Bootstrap standard errors aligned with `names`, once attached.
    pub bootstrap_se: Option<Array1<f64>>,
    /// Successful bootstrap replicates behind `bootstrap_se`.
    pub replicates_used: usize,
    /// Bootstrap replicates dropped because re-estimation failed.
    pub failed_replicates: usize,
}

impl MsmEstimate {
    /// The coefficient for a named design column.
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|q| self.coefficients[q])
    }

    /// The bootstrap standard error for a named design column.
    pub fn se(&self, name: &str) -> Option<f64> {
        let q = self.names.iter().position(|n| n == name)?;
        self.bootstrap_se.as_ref().map(|s| s[q])
    }

    /// Attach bootstrap standard errors produced by [`bootstrap`].
    pub fn with_bootstrap(mut self, summary: &BootstrapSummary) -> Result<MsmEstimate> {
        if summary.names != self.names {
            return Err(Error::validation(format!(
                "bootstrap coefficient names [{}] do not match the fitted model's [{}]",
                summary.names.join(", "),
                self.names.join(", ")
            )));
        }
        self.bootstrap_se = Some(summary.se.clone());
        self.replicates_used = summary.replicates_used;
        self.failed_replicates = summary.failed_replicates;
        Ok(self)
    }

    /// Write `coefficient,estimate,se` rows; the `se` field is empty until
    /// bootstrap standard errors are attached.
    pub fn write_csv<W: IoWrite>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["coefficient", "estimate", "se"]).map_err(csv_err)?;
        for (q, name) in self.names.iter().enumerate() {
            let se = match &self.bootstrap_se {
                Some(s) => format!("{}", s[q]),
                None => String::new(),
            };
            w.write_record([name.as_str(), &format!("{}", self.coefficients[q]), &se])
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

    pub fn to_json(&self) -> serde_json::Value {
        let coefficients: Vec<serde_json::Value> = self
            .names
            .iter()
            .enumerate()
            .map(|(q, name)| {
                serde_json::json!({
                    "name": name,
                    "estimate": self.coefficients[q],
                    "se": self.bootstrap_se.as_ref().map(|s| s[q]),
                })
            })
            .collect();
        serde_json::json!({
            "coefficients": coefficients,
            "replicates_used": self.replicates_used,
            "failed_replicates": self.failed_replicates,
        })
    }
}

/// Fit the marginal structural model by weighted least squares.
///
/// Rows are the observed (subject, visit) pairs at visits `1..=T`; every
/// such row must carry a defined weight. The coefficients solve
/// `Σ_ij w_ij x_ij (y_ij − x_ijᵀb) = 0` — the weighted estimating
/// equations for an identity link with unit working variances — so the fit
/// is deterministic given the data, design, and weights.
pub fn fit_msm(
    data: &LongitudinalDataset,
    spec: &MsmSpec,
    weights: &WeightMatrix,
) -> Result<MsmEstimate> {
    let design = build_design(data, &spec.outcome_design, (1, data.t_max()))?;
    for label in &spec.treatment_term_labels {
        if !design.names.contains(label) {
            return Err(Error::validation(format!(
                "treatment term '{label}' is not a column of the outcome design (columns: {})",
                design.names.join(", ")
            )));
        }
    }
    let y = response_values(data, &spec.outcome_design, &design)?;
    let w = weights.values_for(&design.row_index);
    for (k, &v) in w.iter().enumerate() {
        if !v.is_finite() {
            let (i, j) = design.row_index[k];
            return Err(Error::validation(format!(
                "no weight is defined at subject {}, visit {j}, but the row is observed",
                data.id(i)
            )));
        }
    }
    if w.sum() <= 0.0 {
        return Err(Error::numerical(
            "total weight is zero: no observed row carries positive weight",
        ));
    }
    glm::check_full_rank(&design, Some(&w))?;
    let coefficients = linalg::solve_wls(&design.x, &y, &w)?;
    Ok(MsmEstimate {
        names: design.names,
        coefficients,
        bootstrap_se: None,
        replicates_used: 0,
        failed_replicates: 0,
    })
}

/// Standard errors from subject-level bootstrap resampling.
#[derive(Debug, Clone)]
pub struct BootstrapSummary {
    /// Coefficient names, matching the estimates' design columns.
    pub names: Vec<String>,
    /// Sample standard deviation of each coefficient across successful
    /// replicates.
    pub se: Array1<f64>,
    pub replicates_used: usize,
    pub failed_replicates: usize,
    /// `(replicate index, error message)` for every failed replicate.
    pub failures: Vec<(usize, String)>,
    /// Successful replicate estimates, one row per replicate in replicate
    /// order.
    pub estimates: Array2<f64>,
}

impl BootstrapSummary {
    pub fn failure_rate(&self) -> f64 {
        let total = self.replicates_used + self.failed_replicates;
        if total == 0 {
            0.0
        } else {
            self.failed_replicates as f64 / total as f64
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "coefficients": self
                .names
                .iter()
                .enumerate()
                .map(|(q, name)| serde_json::json!({"name": name, "se": self.se[q]}))
                .collect::<Vec<_>>(),
            "replicates_used": self.replicates_used,
            "failed_replicates": self.failed_replicates,
            "failure_rate": self.failure_rate(),
            "failures": self
                .failures
                .iter()
                .map(|(k, m)| serde_json::json!({"replicate": k, "error": m}))
                .collect::<Vec<_>>(),
        })
    }
}

/// Bootstrap the full estimation pipeline by resampling subjects.
///
/// Each replicate draws `n` subjects with replacement — whole trajectories,
/// so within-subject dependence is preserved — and runs `pipeline` on the
/// resampled dataset. The pipeline must re-estimate everything downstream
/// of the data (weight models, calibration, the outcome regression); its
/// replicate receives no shared state. Replicate RNG streams are derived
/// from `(seed, replicate index)`, so results are bit-identical regardless
/// of thread count or scheduling order.
///
/// Replicates whose pipeline returns an error are excluded from the
/// standard deviations and reported in the summary; a failure rate above
/// [`MAX_FAILURE_RATE`] aborts with the first failure messages instead,
/// since standard errors from a heavily selected set of resamples would be
/// misleading.
pub fn bootstrap<F>(
    data: &LongitudinalDataset,
    replicates: usize,
    seed: u64,
    pipeline: F,
) -> Result<BootstrapSummary>
where
    F: Fn(&LongitudinalDataset) -> Result<MsmEstimate> + Sync,
{
    if replicates < 2 {
        return Err(Error::validation(format!(
            "bootstrap needs at least 2 replicates (got {replicates})"
        )));
    }
    let n = data.n();
    let results: Vec<std::result::Result<MsmEstimate, String>> = (0..replicates)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::replicate_rng(seed, k as u64);
            let subjects: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = data.resample(&subjects);
            pipeline(&sample).map_err(|e| e.to_string())
        })
        .collect();

    let mut names: Option<Vec<String>> = None;
    let mut kept: Vec<Array1<f64>> = Vec::new();
    let mut failures: Vec<(usize, String)> = Vec::new();
    for (k, outcome) in results.into_iter().enumerate() {
        match outcome {
            Ok(estimate) => {
                match &names {
                    None => names = Some(estimate.names.clone()),
                    Some(expected) if *expected != estimate.names => {
                        return Err(Error::numerical(
                            "bootstrap replicates disagree on coefficient names; \
                             the pipeline does not build a fixed design",
                        ));
                    }
                    Some(_) => {}
                }
                kept.push(estimate.coefficients);
            }
            Err(message) => failures.push((k, message)),
        }
    }

    let failed = failures.len();
    if failed as f64 > MAX_FAILURE_RATE * replicates as f64 {
        let shown: Vec<String> =
            failures.iter().take(3).map(|(k, m)| format!("replicate {k}: {m}")).collect();
        return Err(Error::numerical(format!(
            "bootstrap aborted: {failed} of {replicates} replicates failed ({:.1}%, limit {:.0}%); {}",
            100.0 * failed as f64 / replicates as f64,
            100.0 * MAX_FAILURE_RATE,
            shown.join("; ")
        )));
    }
    // replicates ≥ 2 with at most a 20% failure rate leaves at least two
    // successes, so the sample standard deviation below is well defined.
    let names = match names {
        Some(v) => v,
        None => {
            return Err(Error::numerical(
                "bootstrap produced no successful replicates",
            ))
        }
    };

    let used = kept.len();
    let p = names.len();
    let mut estimates = Array2::<f64>::zeros((used, p));
    for (row, coefficients) in kept.iter().enumerate() {
        estimates.row_mut(row).assign(coefficients);
    }
    let mut se = Array1::<f64>::zeros(p);
    for q in 0..p {
        let column = estimates.column(q);
        let mean = column.sum() / used as f64;
        let ss: f64 = column.iter().map(|v| (v - mean) * (v - mean)).sum();
        se[q] = (ss / (used - 1) as f64).sqrt();
    }

    Ok(BootstrapSummary {
        names,
        se,
        replicates_used: used,
        failed_replicates: failed,
        failures,
        estimates,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse(format!("csv write failed: {e}"))
}
