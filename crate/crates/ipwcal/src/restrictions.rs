//! Linear balance-restriction systems over calibrated weight vectors.
//!
//! A restriction system pairs an `m × r` coefficient matrix `K` — one row per
//! calibrated (subject, visit) weight, one column per restriction — with an
//! `r`-vector of targets `l`.  A weight vector `w` satisfies the system when
//! `Kᵀw = l`.  The builders here produce the families used in practice:
//! cumulative score balance for ordinal and continuous treatment assignment,
//! mean-one normalization, and complete-case balance for dependent censoring.
//! [`assemble_joint`] stacks families defined over a shared row basis and
//! prunes redundant columns before the system is handed to the solver.

use std::fs::File;
use std::io::Write as IoWrite;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::dataset::LongitudinalDataset;
use crate::design::{build_design, DesignMatrix, DesignSpec};
use crate::error::{Error, Result};
use crate::glm::{self, LogisticFit};
use crate::linalg;
use crate::weights::TreatmentModel;

/// Columns whose largest absolute entry falls below this are pruned outright.
pub const ZERO_COLUMN_TOL: f64 = 1e-10;
/// Relative tolerance of the rank-revealing prune for dependent columns.
pub const DEPENDENT_COLUMN_TOL: f64 = 1e-10;
/// Fitted treatment variances below this cannot support score restrictions.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// The calibration family a restriction column belongs to.  The joint
/// assembler uses the tag to decide which columns its collinearity rule may
/// remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestrictionFamily {
    Treatment,
    Normalization,
    Censoring,
}

/// A linear restriction system `Kᵀw = l` over calibrated weights.
#[derive(Debug, Clone)]
pub struct RestrictionSystem {
    /// Coefficients, one row per calibrated weight, one column per restriction.
    pub k: Array2<f64>,
    /// Targets, one per restriction.
    pub l: Array1<f64>,
    /// The (subject index, visit) behind each row of `k`.
    pub row_index: Vec<(usize, usize)>,
    /// Human-readable restriction names, one per column.
    pub column_labels: Vec<String>,
    /// Family tag for each column.
    pub families: Vec<RestrictionFamily>,
    /// Descriptions of the probe models and designs the system was built from.
    pub probe_spec: Vec<String>,
}

impl RestrictionSystem {
    /// Number of calibrated weights (rows of `K`).
    pub fn m(&self) -> usize {
        self.k.nrows()
    }

    /// Number of restrictions (columns of `K`).
    pub fn r(&self) -> usize {
        self.k.ncols()
    }

    /// `Kᵀw − l`: the zero vector exactly when `w` satisfies the system.
    pub fn residual(&self, w: &Array1<f64>) -> Array1<f64> {
        self.k.t().dot(w) - &self.l
    }

    /// Write the balance diagnostic table: one row per restriction with its
    /// target and the residuals under the initial and calibrated weights.
    pub fn write_diagnostics_csv<W: IoWrite>(
        &self,
        initial: &Array1<f64>,
        calibrated: &Array1<f64>,
        out: W,
    ) -> Result<()> {
        if initial.len() != self.m() || calibrated.len() != self.m() {
            return Err(Error::validation(format!(
                "diagnostic weight vectors must have {} entries, got {} and {}",
                self.m(),
                initial.len(),
                calibrated.len()
            )));
        }
        let before = self.residual(initial);
        let after = self.residual(calibrated);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "target", "residual_initial", "residual_calibrated"])
            .map_err(csv_err)?;
        for q in 0..self.r() {
            w.write_record(&[
                self.column_labels[q].clone(),
                format!("{}", self.l[q]),
                format!("{}", before[q]),
                format!("{}", after[q]),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::parse(format!("csv write failed: {e}")))?;
        Ok(())
    }

    /// [`Self::write_diagnostics_csv`] to a file path.
    pub fn write_diagnostics_csv_path(
        &self,
        initial: &Array1<f64>,
        calibrated: &Array1<f64>,
        path: impl AsRef<Path>,
    ) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_diagnostics_csv(initial, calibrated, file)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse(format!("csv write failed: {e}"))
}

/// Every builder receives the calibrated (subject, visit) rows and emits one
/// `K` row per entry, in order; the rows must refer to observed follow-up
/// records.
fn check_rows(data: &LongitudinalDataset, rows: &[(usize, usize)]) -> Result<()> {
    let t = data.t_max();
    for &(i, j) in rows {
        if i >= data.n() || j < 1 || j > t {
            return Err(Error::validation(format!(
                "weight row (subject index {i}, visit {j}) is outside the dataset"
            )));
        }
        if !data.observed(i, j) {
            return Err(Error::validation(format!(
                "cannot calibrate the weight at subject {}, visit {j}: the record is censored",
                data.id(i)
            )));
        }
    }
    Ok(())
}

/// Lookup table from flat (subject, visit) to a row of `design.x`;
/// `usize::MAX` marks visits without a design row.
fn design_lookup(design: &DesignMatrix, n: usize, visits: usize) -> Vec<usize> {
    let mut lut = vec![usize::MAX; n * visits];
    for (row, &(i, j)) in design.row_index.iter().enumerate() {
        lut[i * visits + j] = row;
    }
    lut
}

/// Write one `K` column: the entry for weight (i, j) is the prefix sum of
/// the per-visit summands `s` (flat at `i·T + k − 1`) over visits k ≤ j.
fn scatter_cumulative(
    k: &mut Array2<f64>,
    rows: &[(usize, usize)],
    s: &[f64],
    t: usize,
    col: usize,
) {
    let n = s.len() / t;
    let mut cum = vec![0.0; s.len()];
    for i in 0..n {
        let mut acc = 0.0;
        for v in 0..t {
            acc += s[i * t + v];
            cum[i * t + v] = acc;
        }
    }
    for (ridx, &(i, j)) in rows.iter().enumerate() {
        k[[ridx, col]] = cum[i * t + j - 1];
    }
}

/// Cumulative score-balance restrictions for an ordinal or binary treatment
/// process.
///
/// For probe design `X̃⁰` over the any-treatment assignment, the column for
/// regressor `q` carries, at weight (i, j), the cumulative residual score
/// `Σ_{k≤j} (a⁰_ik − ê⁰_ik)·X̃⁰_q(i, k)`; the intensified block (ordinal
/// models only, probed by `x1_formula`) uses `a⁰_ik·(a¹_ik − ê¹_ik)·X̃¹_q(i, k)`.
/// The fitted numerator model — treatment history only — supplies the
/// predicted probabilities ê.  All targets are zero: satisfaction means that
/// in the weighted sample the assignment residuals are uncorrelated with the
/// probe regressors, cumulatively over time.
pub fn ordinal_treatment_restrictions(
    data: &LongitudinalDataset,
    rows: &[(usize, usize)],
    numerator: &TreatmentModel,
    x0_formula: &str,
    x1_formula: Option<&str>,
) -> Result<RestrictionSystem> {
    check_rows(data, rows)?;
    let t = data.t_max();
    let visits = data.visits();
    let n = data.n();
    let (num0, num1) = match numerator {
        TreatmentModel::Ordinal { a0, a1 } => (a0, Some(a1)),
        TreatmentModel::Binary { a0 } => (a0, None),
        TreatmentModel::Continuous { .. } => {
            return Err(Error::validation(
                "ordinal balance restrictions need a binary or ordinal numerator model",
            ))
        }
    };
    if x1_formula.is_some() && num1.is_none() {
        return Err(Error::validation(
            "an intensified-assignment probe design needs an ordinal numerator model",
        ));
    }

    let mut summands: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();

    let probe0 = build_design(data, &DesignSpec::new(x0_formula, "a0"), (1, t))?;
    let num0_design = build_design(data, &num0.0, (1, t))?;
    let e0 = glm::predict_prob(&num0.1, &num0_design)?;
    // same response, same visit range: the row sets coincide
    debug_assert_eq!(probe0.row_index, num0_design.row_index);
    let a0_col = data.column("a0")?;
    for q in 0..probe0.ncols() {
        let mut s = vec![0.0; n * t];
        for (row, &(i, j)) in probe0.row_index.iter().enumerate() {
            let resid = a0_col[i * visits + j] - e0[row];
            s[i * t + j - 1] = resid * probe0.x[[row, q]];
        }
        summands.push(s);
        labels.push(format!("a0-score:{}", probe0.names[q]));
    }

    let mut spec_desc = format!(
        "treatment score balance: a0 probe [{x0_formula}], residuals from numerator [{}]",
        num0.0.formula
    );
    if let Some(x1f) = x1_formula {
        let num1 = num1.expect("ordinal numerator checked above");
        let probe1 = build_design(data, &DesignSpec::new(x1f, "a1"), (1, t))?;
        let num1_design = build_design(data, &num1.0, (1, t))?;
        let e1 = glm::predict_prob(&num1.1, &num1_design)?;
        debug_assert_eq!(probe1.row_index, num1_design.row_index);
        let a1_col = data.column("a1")?;
        for q in 0..probe1.ncols() {
            let mut s = vec![0.0; n * t];
            for (row, &(i, j)) in probe1.row_index.iter().enumerate() {
                // rows carry a⁰ = 1 by eligibility, so the a⁰ factor is one;
                // ineligible visits contribute zero, as the score demands
                let resid = a1_col[i * visits + j] - e1[row];
                s[i * t + j - 1] = resid * probe1.x[[row, q]];
            }
            summands.push(s);
            labels.push(format!("a1-score:{}", probe1.names[q]));
        }
        spec_desc.push_str(&format!(
            "; a1 probe [{x1f}], residuals from numerator [{}]",
            num1.0.formula
        ));
    }

    let r = summands.len();
    let mut k = Array2::zeros((rows.len(), r));
    for (q, s) in summands.iter().enumerate() {
        scatter_cumulative(&mut k, rows, s, t, q);
    }
    Ok(RestrictionSystem {
        k,
        l: Array1::zeros(r),
        row_index: rows.to_vec(),
        column_labels: labels,
        families: vec![RestrictionFamily::Treatment; r],
        probe_spec: vec![spec_desc],
    })
}

/// Cumulative score-balance restrictions for a continuous treatment process.
///
/// Mean-score columns carry `Σ_{k≤j} ((a_ik − μ̂_ik)/σ̂²_ik)·X̃^μ_q(i, k)` and
/// variance-score columns `Σ_{k≤j} ((a_ik − μ̂_ik)²/σ̂²_ik − 1)·X̃^σ_q(i, k)`,
/// with both moments predicted from the numerator heteroscedastic-normal
/// fit; all targets are zero.
pub fn continuous_treatment_restrictions(
    data: &LongitudinalDataset,
    rows: &[(usize, usize)],
    numerator: &TreatmentModel,
    mu_formula: &str,
    sigma_formula: &str,
) -> Result<RestrictionSystem> {
    check_rows(data, rows)?;
    let t = data.t_max();
    let visits = data.visits();
    let n = data.n();
    let (mu_spec, sigma_spec, fit) = match numerator {
        TreatmentModel::Continuous { mu_spec, sigma_spec, fit } => (mu_spec, sigma_spec, fit),
        _ => {
            return Err(Error::validation(
                "continuous balance restrictions need a continuous numerator model",
            ))
        }
    };

    let probe_mu = build_design(data, &DesignSpec::new(mu_formula, "a"), (1, t))?;
    let probe_sigma = build_design(data, &DesignSpec::new(sigma_formula, "a"), (1, t))?;
    let num_mu = build_design(data, mu_spec, (1, t))?;
    let num_sigma = build_design(data, sigma_spec, (1, t))?;
    let mu = glm::predict_mean(fit, &num_mu)?;
    let var = glm::predict_variance(fit, &num_sigma)?;
    debug_assert_eq!(probe_mu.row_index, num_mu.row_index);
    let a_col = data.column("a")?;

    for (row, &(i, j)) in num_mu.row_index.iter().enumerate() {
        if var[row] < VARIANCE_FLOOR {
            return Err(Error::numerical(format!(
                "degenerate fitted treatment variance {:e} at subject {}, visit {j}",
                var[row],
                data.id(i)
            )));
        }
    }

    let r = probe_mu.ncols() + probe_sigma.ncols();
    let mut k = Array2::zeros((rows.len(), r));
    let mut labels = Vec::with_capacity(r);
    for q in 0..probe_mu.ncols() {
        let mut s = vec![0.0; n * t];
        for (row, &(i, j)) in probe_mu.row_index.iter().enumerate() {
            let resid = a_col[i * visits + j] - mu[row];
            s[i * t + j - 1] = resid / var[row] * probe_mu.x[[row, q]];
        }
        scatter_cumulative(&mut k, rows, &s, t, q);
        labels.push(format!("mean-score:{}", probe_mu.names[q]));
    }
    for q in 0..probe_sigma.ncols() {
        let mut s = vec![0.0; n * t];
        for (row, &(i, j)) in probe_sigma.row_index.iter().enumerate() {
            let resid = a_col[i * visits + j] - mu[row];
            s[i * t + j - 1] = (resid * resid / var[row] - 1.0) * probe_sigma.x[[row, q]];
        }
        scatter_cumulative(&mut k, rows, &s, t, probe_mu.ncols() + q);
        labels.push(format!("var-score:{}", probe_sigma.names[q]));
    }

    Ok(RestrictionSystem {
        k,
        l: Array1::zeros(r),
        row_index: rows.to_vec(),
        column_labels: labels,
        families: vec![RestrictionFamily::Treatment; r],
        probe_spec: vec![format!(
            "treatment score balance (continuous): mean probe [{mu_formula}], variance probe \
             [{sigma_formula}], moments from numerator [mu: {}; sigma: {}]",
            mu_spec.formula, sigma_spec.formula
        )],
    })
}

/// Mean-one normalization restrictions.
///
/// With `per_visit`, one column per follow-up visit pins the weight total at
/// that visit to the number of calibrated rows there, so the mean weight is
/// one among the subjects still contributing; pooled normalization uses a
/// single all-ones column with the total row count as target.
pub fn normalization_restrictions(rows: &[(usize, usize)], per_visit: bool) -> RestrictionSystem {
    let m = rows.len();
    if per_visit {
        let mut visits: Vec<usize> = rows.iter().map(|&(_, j)| j).collect();
        visits.sort_unstable();
        visits.dedup();
        let r = visits.len();
        let mut k = Array2::zeros((m, r));
        let mut l = Array1::zeros(r);
        for (ridx, &(_, j)) in rows.iter().enumerate() {
            let q = visits.binary_search(&j).expect("visit drawn from rows");
            k[[ridx, q]] = 1.0;
            l[q] += 1.0;
        }
        RestrictionSystem {
            k,
            l,
            row_index: rows.to_vec(),
            column_labels: visits.iter().map(|j| format!("mean-one:visit={j}")).collect(),
            families: vec![RestrictionFamily::Normalization; r],
            probe_spec: vec!["per-visit mean-one normalization".to_string()],
        }
    } else {
        RestrictionSystem {
            k: Array2::ones((m, 1)),
            l: Array1::from_elem(1, m as f64),
            row_index: rows.to_vec(),
            column_labels: vec!["mean-one:all".to_string()],
            families: vec![RestrictionFamily::Normalization],
            probe_spec: vec!["pooled mean-one normalization".to_string()],
        }
    }
}

/// Which population total the censoring balance targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CensoringTarget {
    /// A repeatedly measured outcome: the pseudo-population is matched at
    /// every follow-up visit, with visit j's comparison weighted by the
    /// `T − j + 1` visits that depend on it.
    Repeated,
    /// A single end-of-study outcome.
    Eventual,
}

impl CensoringTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            CensoringTarget::Repeated => "repeated",
            CensoringTarget::Eventual => "eventual",
        }
    }

    pub fn parse(s: &str) -> Result<CensoringTarget> {
        match s {
            "repeated" => Ok(CensoringTarget::Repeated),
            "eventual" => Ok(CensoringTarget::Eventual),
            other => Err(Error::parse(format!(
                "unknown censoring target '{other}' (expected 'repeated' or 'eventual')"
            ))),
        }
    }
}

/// Complete-case balance restrictions for dependent censoring.
///
/// Let `D_i(j)` denote the probe design row of the censoring model at visit
/// `j` — functionals of the history through visit `j − 1`.  The `K` row for
/// weight (i, j) is `c_j·D_i(j) − d_j·s_{i,j+1}·D_i(j+1)` and the target is
/// `c_1·Σᵢ s_{i1}·D_i(1)` over all subjects, where `(c_j, d_j)` is
/// `(T − j + 1, T − j)` for the repeated target and `(1, I(j < T))` for the
/// eventual target, and `s_ij` is the fitted stabilizer probability (one
/// when no stabilizer is given).  Satisfaction means the weighted complete
/// cases at each visit stand in for the cohort that would have been observed
/// without dropout — down-weighted by the stabilizer when calibrating
/// stabilized weights.
pub fn censoring_restrictions(
    data: &LongitudinalDataset,
    rows: &[(usize, usize)],
    h_formula: &str,
    target: CensoringTarget,
    stabilizer: Option<&(DesignSpec, LogisticFit)>,
) -> Result<RestrictionSystem> {
    check_rows(data, rows)?;
    let t = data.t_max();
    let n = data.n();
    let visits = data.visits();
    let probe = build_design(data, &DesignSpec::new(h_formula, "r"), (1, t))?;
    let lut = design_lookup(&probe, n, visits);
    // fitted stabilizer probabilities on the at-risk rows, flat by (i, j)
    let stab: Option<Vec<f64>> = match stabilizer {
        Some((spec, fit)) => {
            let d = build_design(data, spec, (1, t))?;
            let p = glm::predict_prob(fit, &d)?;
            let mut flat = vec![f64::NAN; n * visits];
            for (row, &(i, j)) in d.row_index.iter().enumerate() {
                flat[i * visits + j] = p[row];
            }
            Some(flat)
        }
        None => None,
    };
    let stab_at = |i: usize, j: usize| match &stab {
        Some(flat) => flat[i * visits + j],
        None => 1.0,
    };

    let r = probe.ncols();
    let mut k = Array2::zeros((rows.len(), r));
    for (ridx, &(i, j)) in rows.iter().enumerate() {
        let (lead, trail) = match target {
            CensoringTarget::Repeated => ((t - j + 1) as f64, (t - j) as f64),
            CensoringTarget::Eventual => (1.0, if j < t { 1.0 } else { 0.0 }),
        };
        let dj = lut[i * visits + j];
        if dj == usize::MAX {
            return Err(Error::validation(format!(
                "no censoring probe row at subject {}, visit {j}",
                data.id(i)
            )));
        }
        for q in 0..r {
            k[[ridx, q]] += lead * probe.x[[dj, q]];
        }
        if trail != 0.0 {
            // observed at j ⇒ at risk at j + 1, so this row exists
            let dnext = lut[i * visits + j + 1];
            if dnext == usize::MAX {
                return Err(Error::validation(format!(
                    "no censoring probe row at subject {}, visit {}",
                    data.id(i),
                    j + 1
                )));
            }
            let s = trail * stab_at(i, j + 1);
            for q in 0..r {
                k[[ridx, q]] -= s * probe.x[[dnext, q]];
            }
        }
    }

    let lead1 = match target {
        CensoringTarget::Repeated => t as f64,
        CensoringTarget::Eventual => 1.0,
    };
    let mut l = Array1::zeros(r);
    for i in 0..n {
        // every subject is under observation at baseline, hence at risk at
        // the first follow-up visit
        let d1 = lut[i * visits + 1];
        if d1 == usize::MAX {
            return Err(Error::validation(format!(
                "no censoring probe row at subject {}, visit 1",
                data.id(i)
            )));
        }
        let s = lead1 * stab_at(i, 1);
        for q in 0..r {
            l[q] += s * probe.x[[d1, q]];
        }
    }

    let mut spec_desc = format!("censoring balance ({}) on probe [{h_formula}]", target.as_str());
    if let Some((sspec, _)) = stabilizer {
        spec_desc.push_str(&format!(", stabilized by [{}]", sspec.formula));
    }
    Ok(RestrictionSystem {
        k,
        l,
        row_index: rows.to_vec(),
        column_labels: probe.names.iter().map(|nm| format!("censor:{nm}")).collect(),
        families: vec![RestrictionFamily::Censoring; r],
        probe_spec: vec![spec_desc],
    })
}

/// Columns removed while assembling a joint system, by reason.
#[derive(Debug, Clone, Default)]
pub struct PruneReport {
    /// Normalization columns dropped because censoring columns already pin
    /// the weighted totals.
    pub normalization_dropped: Vec<String>,
    /// Columns whose entries were all below [`ZERO_COLUMN_TOL`].
    pub zero_dropped: Vec<String>,
    /// Columns linearly dependent on earlier kept columns.
    pub dependent_dropped: Vec<String>,
}

impl PruneReport {
    pub fn is_empty(&self) -> bool {
        self.normalization_dropped.is_empty()
            && self.zero_dropped.is_empty()
            && self.dependent_dropped.is_empty()
    }

    /// One-line summary for logs and manifests.
    pub fn describe(&self) -> String {
        if self.is_empty() {
            return "no columns pruned".to_string();
        }
        let mut parts = Vec::new();
        if !self.normalization_dropped.is_empty() {
            parts.push(format!(
                "normalization superseded by censoring balance: {}",
                self.normalization_dropped.join(", ")
            ));
        }
        if !self.zero_dropped.is_empty() {
            parts.push(format!("zero columns: {}", self.zero_dropped.join(", ")));
        }
        if !self.dependent_dropped.is_empty() {
            parts.push(format!(
                "linearly dependent columns: {}",
                self.dependent_dropped.join(", ")
            ));
        }
        parts.join("; ")
    }
}

/// Stack restriction systems defined over the same weight rows into one.
///
/// Columns concatenate in the order given.  When censoring columns are
/// present and `drop_normalization_if_censoring` is set (the recommended
/// default), normalization columns are removed first: the censoring balance
/// already fixes the weighted totals, so keeping both would make the system
/// singular.  Zero columns and columns linearly dependent on earlier kept
/// ones are then pruned, and every removal lands in the report.
pub fn assemble_joint(
    systems: &[RestrictionSystem],
    drop_normalization_if_censoring: bool,
) -> Result<(RestrictionSystem, PruneReport)> {
    let first = systems
        .first()
        .ok_or_else(|| Error::validation("no restriction systems to assemble"))?;
    for sys in &systems[1..] {
        if sys.row_index != first.row_index {
            return Err(Error::validation(
                "restriction systems cover different weight rows and cannot be joined",
            ));
        }
    }
    let m = first.m();
    let total: usize = systems.iter().map(|s| s.r()).sum();
    let mut k = Array2::zeros((m, total));
    let mut l = Array1::zeros(total);
    let mut labels = Vec::with_capacity(total);
    let mut families = Vec::with_capacity(total);
    let mut probe_spec = Vec::new();
    let mut c = 0;
    for sys in systems {
        for q in 0..sys.r() {
            for ridx in 0..m {
                k[[ridx, c]] = sys.k[[ridx, q]];
            }
            l[c] = sys.l[q];
            labels.push(sys.column_labels[q].clone());
            families.push(sys.families[q]);
            c += 1;
        }
        probe_spec.extend(sys.probe_spec.iter().cloned());
    }

    let mut report = PruneReport::default();
    let mut keep = vec![true; total];
    let has_censoring = families.contains(&RestrictionFamily::Censoring);
    if drop_normalization_if_censoring && has_censoring {
        for (q, fam) in families.iter().enumerate() {
            if *fam == RestrictionFamily::Normalization {
                keep[q] = false;
                report.normalization_dropped.push(labels[q].clone());
            }
        }
    }
    for q in 0..total {
        if !keep[q] {
            continue;
        }
        let max_abs = (0..m).map(|ridx| k[[ridx, q]].abs()).fold(0.0, f64::max);
        if max_abs < ZERO_COLUMN_TOL {
            keep[q] = false;
            report.zero_dropped.push(labels[q].clone());
        }
    }
    let surviving: Vec<usize> = (0..total).filter(|&q| keep[q]).collect();
    if !surviving.is_empty() {
        let mut sub = Array2::zeros((m, surviving.len()));
        for (sc, &q) in surviving.iter().enumerate() {
            for ridx in 0..m {
                sub[[ridx, sc]] = k[[ridx, q]];
            }
        }
        let rank = linalg::column_rank(&sub, DEPENDENT_COLUMN_TOL);
        for &sc in &rank.dropped {
            let q = surviving[sc];
            keep[q] = false;
            report.dependent_dropped.push(labels[q].clone());
        }
    }

    let kept: Vec<usize> = (0..total).filter(|&q| keep[q]).collect();
    let mut k_out = Array2::zeros((m, kept.len()));
    let mut l_out = Array1::zeros(kept.len());
    let mut labels_out = Vec::with_capacity(kept.len());
    let mut families_out = Vec::with_capacity(kept.len());
    for (qc, &q) in kept.iter().enumerate() {
        for ridx in 0..m {
            k_out[[ridx, qc]] = k[[ridx, q]];
        }
        l_out[qc] = l[q];
        labels_out.push(labels[q].clone());
        families_out.push(families[q]);
    }
    Ok((
        RestrictionSystem {
            k: k_out,
            l: l_out,
            row_index: first.row_index.clone(),
            column_labels: labels_out,
            families: families_out,
            probe_spec,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{from_columns, TreatmentKind};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Two subjects, one follow-up visit, no censoring: a⁰ = (1, 0) at
    /// visit 1.
    fn two_subject_binary() -> LongitudinalDataset {
        from_columns(
            vec!["s1".into(), "s2".into()],
            2,
            TreatmentKind::Binary,
            vec![
                ("r".into(), vec![1.0, 1.0, 1.0, 1.0]),
                ("y".into(), vec![0.0, 1.0, 0.0, 2.0]),
                ("a0".into(), vec![0.0, 1.0, 0.0, 0.0]),
            ],
        )
        .unwrap()
    }

    fn intercept_logistic(coefficient: f64) -> LogisticFit {
        LogisticFit {
            names: vec!["1".to_string()],
            coefficients: array![coefficient],
            converged: true,
            iterations: 0,
            max_abs_score: 0.0,
            quasi_separated: false,
        }
    }

    #[test]
    fn binary_intercept_probe_gives_signed_residuals() {
        let data = two_subject_binary();
        let rows = vec![(0, 1), (1, 1)];
        let numerator = TreatmentModel::Binary {
            a0: (DesignSpec::new("1", "a0"), intercept_logistic(0.0)),
        };
        let sys =
            ordinal_treatment_restrictions(&data, &rows, &numerator, "1", None).unwrap();
        assert_eq!(sys.r(), 1);
        assert_eq!(sys.column_labels, vec!["a0-score:1"]);
        assert_abs_diff_eq!(sys.k[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sys.k[[1, 0]], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sys.l[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn continuous_single_row_matches_closed_form() {
        // one subject, one follow-up visit, a = 2 with fitted mean 0 and
        // variance 1: mean score 2, variance score 3
        let data = from_columns(
            vec!["s1".into()],
            2,
            TreatmentKind::Continuous,
            vec![
                ("r".into(), vec![1.0, 1.0]),
                ("y".into(), vec![0.0, 0.0]),
                ("a".into(), vec![0.0, 2.0]),
            ],
        )
        .unwrap();
        let fit = crate::glm::HetNormalFit {
            mean_names: vec!["1".to_string()],
            mean_coefficients: array![0.0],
            logvar_names: vec!["1".to_string()],
            logvar_coefficients: array![0.0],
            converged: true,
            iterations: 0,
            max_abs_score: 0.0,
        };
        let numerator = TreatmentModel::Continuous {
            mu_spec: DesignSpec::new("1", "a"),
            sigma_spec: DesignSpec::new("1", "a"),
            fit,
        };
        let sys = continuous_treatment_restrictions(&data, &[(0, 1)], &numerator, "1", "1")
            .unwrap();
        assert_eq!(sys.r(), 2);
        assert_abs_diff_eq!(sys.k[[0, 0]], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sys.k[[0, 1]], 3.0, epsilon = 1e-12);
        assert_eq!(sys.column_labels, vec!["mean-score:1", "var-score:1"]);
    }

    #[test]
    fn normalization_counts_rows_per_visit() {
        let rows = vec![(0, 1), (1, 1), (2, 1), (0, 2), (1, 2)];
        let sys = normalization_restrictions(&rows, true);
        assert_eq!(sys.r(), 2);
        assert_eq!(sys.l, array![3.0, 2.0]);
        assert_eq!(sys.column_labels, vec!["mean-one:visit=1", "mean-one:visit=2"]);
        // each row hits exactly its own visit column
        assert_eq!(sys.k[[0, 0]], 1.0);
        assert_eq!(sys.k[[0, 1]], 0.0);
        assert_eq!(sys.k[[3, 1]], 1.0);

        let pooled = normalization_restrictions(&rows, false);
        assert_eq!(pooled.r(), 1);
        assert_eq!(pooled.l[0], 5.0);
        assert!(pooled.k.iter().all(|&v| v == 1.0));
    }

    /// With no censoring, unit weights satisfy the repeated balance system
    /// by telescoping: Kᵀ1 = Σⱼ n((T−j+1) − (T−j)) = nT = l.
    #[test]
    fn uncensored_intercept_probe_is_already_balanced() {
        let data = from_columns(
            vec!["s1".into(), "s2".into(), "s3".into()],
            3,
            TreatmentKind::Binary,
            vec![
                ("r".into(), vec![1.0; 9]),
                ("y".into(), vec![0.0; 9]),
                ("a0".into(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0]),
            ],
        )
        .unwrap();
        let rows: Vec<(usize, usize)> =
            (0..3).flat_map(|i| [(i, 1), (i, 2)]).collect();
        let sys =
            censoring_restrictions(&data, &rows, "1", CensoringTarget::Repeated, None).unwrap();
        assert_eq!(sys.r(), 1);
        assert_abs_diff_eq!(sys.l[0], 6.0, epsilon = 1e-12);
        let ones = Array1::ones(rows.len());
        assert_abs_diff_eq!(sys.residual(&ones)[0], 0.0, epsilon = 1e-12);
    }

    /// At T = 1 the repeated form collapses to a single comparison: the
    /// weighted complete cases against the full-cohort design totals.
    #[test]
    fn single_period_reduces_to_direct_balance() {
        let data = from_columns(
            vec!["s1".into(), "s2".into(), "s3".into()],
            2,
            TreatmentKind::Binary,
            vec![
                ("r".into(), vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0]),
                ("y".into(), vec![0.0, 0.0, 0.0, f64::NAN, 0.0, 0.0]),
                ("a0".into(), vec![1.0, 1.0, 0.0, f64::NAN, 1.0, 0.0]),
                ("x".into(), vec![2.0, 0.0, -1.0, f64::NAN, 0.5, 0.0]),
            ],
        )
        .unwrap();
        let rows = vec![(0, 1), (2, 1)];
        let sys = censoring_restrictions(&data, &rows, "1 + x@1", CensoringTarget::Repeated, None)
            .unwrap();
        // K rows are the design at visit 1 (lagged x = baseline value)
        assert_abs_diff_eq!(sys.k[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sys.k[[0, 1]], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sys.k[[1, 1]], 0.5, epsilon = 1e-12);
        // l sums the same design over all three subjects
        assert_abs_diff_eq!(sys.l[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sys.l[1], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn eventual_target_drops_final_comparison() {
        let data = from_columns(
            vec!["s1".into()],
            3,
            TreatmentKind::Binary,
            vec![
                ("r".into(), vec![1.0, 1.0, 1.0]),
                ("y".into(), vec![0.0, 0.0, 0.0]),
                ("a0".into(), vec![0.0, 1.0, 0.0]),
            ],
        )
        .unwrap();
        let rows = vec![(0, 1), (0, 2)];
        let sys =
            censoring_restrictions(&data, &rows, "1", CensoringTarget::Eventual, None).unwrap();
        // visit 1: 1 − 1 = 0; visit 2 (= T): no trailing term
        assert_abs_diff_eq!(sys.k[[0, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sys.k[[1, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sys.l[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn assembly_prunes_normalization_duplicates_and_zeros() {
        let rows = vec![(0, 1), (1, 1)];
        let norm = normalization_restrictions(&rows, false);
        // a fake censoring system plus a zero column and an exact duplicate
        let censor = RestrictionSystem {
            k: array![[1.0, 0.0, 1.0], [2.0, 0.0, 2.0]],
            l: array![3.0, 0.0, 3.0],
            row_index: rows.clone(),
            column_labels: vec!["censor:1".into(), "censor:z".into(), "censor:dup".into()],
            families: vec![RestrictionFamily::Censoring; 3],
            probe_spec: vec!["test censoring".into()],
        };
        let (joint, report) = assemble_joint(&[norm, censor], true).unwrap();
        assert_eq!(joint.r(), 1);
        assert_eq!(joint.column_labels, vec!["censor:1"]);
        assert_eq!(report.normalization_dropped, vec!["mean-one:all"]);
        assert_eq!(report.zero_dropped, vec!["censor:z"]);
        assert_eq!(report.dependent_dropped, vec!["censor:dup"]);
        assert!(report.describe().contains("zero columns"));
    }

    #[test]
    fn assembly_rejects_mismatched_rows() {
        let a = normalization_restrictions(&[(0, 1)], false);
        let b = normalization_restrictions(&[(1, 1)], false);
        let err = assemble_joint(&[a, b], true).unwrap_err();
        assert!(err.to_string().contains("different weight rows"));
    }

    #[test]
    fn diagnostics_csv_lists_targets_and_residuals() {
        let rows = vec![(0, 1), (1, 1)];
        let sys = normalization_restrictions(&rows, false);
        let w0 = array![1.0, 0.5];
        let w1 = array![1.0, 1.0];
        let mut buf = Vec::new();
        sys.write_diagnostics_csv(&w0, &w1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "label,target,residual_initial,residual_calibrated"
        );
        assert_eq!(lines.next().unwrap(), "mean-one:all,2,-0.5,0");
    }
}
