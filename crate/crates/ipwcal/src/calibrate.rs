//! Convex exponential-tilting solver for weight calibration.
//!
//! Calibration multiplies each initial weight by `exp(kᵢᵀλ)`, choosing the
//! multiplier vector `λ` so that the balance restrictions `Kᵀw⋆ = l` hold
//! exactly in the sample.  Solving the restrictions is equivalent to
//! minimizing the convex objective `1ᵀ(w₀ ∘ exp(Kλ)) − lᵀλ`, whose gradient
//! is exactly the balance residual of the tilted weights: a damped Newton
//! iteration from `λ = 0` starts at the raw imbalance and drives it to zero.
//! Positivity of the weights is preserved by construction.

use ndarray::{Array1, Array2};
use serde_json::json;

use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::restrictions::RestrictionSystem;
use crate::weights::{WeightKind, WeightMatrix};

/// Converged when `‖gradient‖∞ ≤ tolerance·max(1, ‖l‖∞)`.
pub const CONVERGENCE_TOL: f64 = 1e-8;
/// Newton iteration cap.
pub const MAX_ITERATIONS: usize = 100;
/// Tilt exponents `|kᵢᵀλ|` above this would overflow `exp`; the line search
/// treats such steps as too large and backs off.
pub const EXP_ARG_BOUND: f64 = 700.0;
/// `‖λ‖∞` beyond this is read as divergence: no positive reweighting
/// satisfies the restrictions.
pub const LAMBDA_BOUND: f64 = 1e4;
/// Consecutive damped steps without gradient progress before the system is
/// declared infeasible.
pub const STALL_LIMIT: usize = 20;
/// Line-search halvings before giving up on a descent step.
const MAX_HALVINGS: usize = 60;

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Starting multipliers; zero (no calibration) when absent.
    pub start: Option<Array1<f64>>,
    pub max_iterations: usize,
    /// Scale of the convergence bound `‖gradient‖∞ ≤ tolerance·max(1, ‖l‖∞)`.
    pub tolerance: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { start: None, max_iterations: MAX_ITERATIONS, tolerance: CONVERGENCE_TOL }
    }
}

/// Outcome of a calibration solve.
#[derive(Debug, Clone)]
pub struct CalibrationSolution {
    /// Fitted multipliers, one per restriction column.
    pub lambda: Array1<f64>,
    /// Accepted Newton steps.
    pub iterations: usize,
    /// `‖Kᵀw⋆ − l‖∞` at the returned multipliers.
    pub final_residual_inf: f64,
    pub objective_value: f64,
    /// The residual bound was met.
    pub converged: bool,
    /// The objective appears unbounded below: no positive reweighting can
    /// satisfy the restrictions.  Mutually exclusive with `converged`.
    pub infeasible: bool,
    /// Newton systems that needed a diagonal jitter to factor.
    pub jittered_steps: usize,
    /// Restriction labels, aligned with `lambda`.
    pub column_labels: Vec<String>,
}

impl CalibrationSolution {
    /// Serialize multipliers (by restriction label, in system order) and
    /// solver diagnostics.
    pub fn to_json(&self) -> serde_json::Value {
        let lambda: Vec<serde_json::Value> = self
            .column_labels
            .iter()
            .zip(self.lambda.iter())
            .map(|(label, value)| json!({ "label": label, "value": value }))
            .collect();
        json!({
            "lambda": lambda,
            "iterations": self.iterations,
            "final_residual_inf": self.final_residual_inf,
            "objective_value": self.objective_value,
            "converged": self.converged,
            "infeasible": self.infeasible,
            "jittered_steps": self.jittered_steps,
        })
    }
}

/// Tilt exponents, objective, and tilted weights at `lambda`; `None` when a
/// tilt exponent exceeds [`EXP_ARG_BOUND`] (step too large).
fn objective_tilt(
    w0: &Array1<f64>,
    k: &Array2<f64>,
    l: &Array1<f64>,
    lambda: &Array1<f64>,
) -> Option<(f64, Array1<f64>)> {
    let eta = k.dot(lambda);
    if eta.iter().any(|e| e.abs() > EXP_ARG_BOUND) {
        return None;
    }
    let tilted = w0 * &eta.mapv(f64::exp);
    let objective = tilted.sum() - l.dot(lambda);
    Some((objective, tilted))
}

/// `Kᵀ diag(w) K`, the objective's Hessian at tilted weights `w`.
fn hessian(k: &Array2<f64>, tilted: &Array1<f64>) -> Array2<f64> {
    let r = k.ncols();
    let mut h = Array2::zeros((r, r));
    for (i, &w) in tilted.iter().enumerate() {
        for a in 0..r {
            let ka = k[[i, a]];
            if ka == 0.0 {
                continue;
            }
            let wka = w * ka;
            for b in a..r {
                h[[a, b]] += wka * k[[i, b]];
            }
        }
    }
    for a in 0..r {
        for b in 0..a {
            h[[a, b]] = h[[b, a]];
        }
    }
    h
}

/// Objective value, gradient, and Hessian of the tilting objective at
/// `lambda`.  The gradient equals the balance residual `Kᵀ(w₀∘exp(Kλ)) − l`
/// and the Hessian is symmetric positive semidefinite.  Requires `w0 > 0`
/// elementwise.
pub fn objective_grad_hess(
    w0: &Array1<f64>,
    k: &Array2<f64>,
    l: &Array1<f64>,
    lambda: &Array1<f64>,
) -> Result<(f64, Array1<f64>, Array2<f64>)> {
    let (objective, tilted) = objective_tilt(w0, k, l, lambda).ok_or_else(|| {
        Error::numerical(format!(
            "calibration tilt exponent exceeds {EXP_ARG_BOUND}: the step is too large"
        ))
    })?;
    let gradient = k.t().dot(&tilted) - l;
    Ok((objective, gradient, hessian(k, &tilted)))
}

/// Newton direction `H⁻¹g`, adding a diagonal jitter of `1e-10·trace/r` only
/// when the plain factorization fails.
fn newton_direction(
    h: &Array2<f64>,
    g: &Array1<f64>,
    jittered_steps: &mut usize,
) -> Result<Array1<f64>> {
    if let Some(chol) = linalg::cholesky(h) {
        return Ok(linalg::cholesky_backsolve(&chol, g));
    }
    *jittered_steps += 1;
    let r = h.nrows();
    let trace: f64 = (0..r).map(|q| h[[q, q]]).sum();
    let mut hj = h.clone();
    let jitter = 1e-10 * trace / r as f64;
    for q in 0..r {
        hj[[q, q]] += jitter;
    }
    if let Some(chol) = linalg::cholesky(&hj) {
        return Ok(linalg::cholesky_backsolve(&chol, g));
    }
    linalg::solve_general(&hj, g)
}

/// Minimize the tilting objective by damped Newton iteration from `λ = 0`
/// (or `options.start`).
///
/// Converged means `‖Kᵀw⋆ − l‖∞ ≤ tolerance·max(1, ‖l‖∞)`; since the
/// objective is strictly convex wherever `K` has full column rank, the
/// minimizer — and hence the calibrated weight vector — is unique.  The
/// infeasible flag reports apparent unboundedness: the multiplier norm
/// passed [`LAMBDA_BOUND`], [`STALL_LIMIT`] consecutive damped steps made no
/// gradient progress, or every line-search trial overran the tilt bound
/// [`EXP_ARG_BOUND`] — the minimizer lies beyond representable tilts, so no
/// positive reweighting satisfies the restrictions.
pub fn solve(
    w0: &Array1<f64>,
    system: &RestrictionSystem,
    options: &SolveOptions,
) -> Result<CalibrationSolution> {
    let m = system.m();
    let r = system.r();
    if w0.len() != m {
        return Err(Error::validation(format!(
            "initial weight vector has {} entries but the system has {m} rows",
            w0.len()
        )));
    }
    for (idx, &v) in w0.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            let (i, j) = system.row_index[idx];
            return Err(Error::numerical(format!(
                "initial weight {v} at subject index {i}, visit {j} is not positive"
            )));
        }
    }
    let mut lambda = match &options.start {
        Some(s) => {
            if s.len() != r {
                return Err(Error::validation(format!(
                    "starting multipliers have {} entries, expected {r}",
                    s.len()
                )));
            }
            s.clone()
        }
        None => Array1::zeros(r),
    };
    if r == 0 {
        // nothing to balance: the initial weights already are the solution
        return Ok(CalibrationSolution {
            lambda,
            iterations: 0,
            final_residual_inf: 0.0,
            objective_value: w0.sum(),
            converged: true,
            infeasible: false,
            jittered_steps: 0,
            column_labels: Vec::new(),
        });
    }

    let k = &system.k;
    let l = &system.l;
    let tolerance = options.tolerance * f64::max(1.0, linalg::inf_norm(l));
    let (mut objective, mut tilted) = objective_tilt(w0, k, l, &lambda).ok_or_else(|| {
        Error::numerical("starting multipliers overflow the calibration tilt".to_string())
    })?;
    let mut gradient = k.t().dot(&tilted) - l;
    let mut gradient_norm = linalg::inf_norm(&gradient);

    let mut iterations = 0;
    let mut converged = false;
    let mut infeasible = false;
    let mut jittered_steps = 0;
    let mut stalled = 0usize;

    while iterations < options.max_iterations {
        if gradient_norm <= tolerance {
            converged = true;
            break;
        }
        if linalg::inf_norm(&lambda) > LAMBDA_BOUND {
            infeasible = true;
            break;
        }
        let h = hessian(k, &tilted);
        let direction = newton_direction(&h, &gradient, &mut jittered_steps)?;
        let mut step = 1.0;
        let mut accepted = false;
        let mut damped = false;
        let mut all_overflowed = true;
        for _ in 0..MAX_HALVINGS {
            let candidate = &lambda - &(&direction * step);
            if let Some((cand_obj, cand_tilted)) = objective_tilt(w0, k, l, &candidate) {
                all_overflowed = false;
                if cand_obj <= objective + 1e-14 * objective.abs() {
                    lambda = candidate;
                    objective = cand_obj;
                    gradient = k.t().dot(&cand_tilted) - l;
                    tilted = cand_tilted;
                    accepted = true;
                    break;
                }
            }
            step /= 2.0;
            damped = true;
        }
        if !accepted {
            if all_overflowed {
                // even the most damped step overruns the tilt bound: the
                // minimizer lies beyond representable tilts
                infeasible = true;
            }
            // otherwise: no representable step decreases the objective
            break;
        }
        iterations += 1;
        let new_norm = linalg::inf_norm(&gradient);
        if damped && new_norm >= gradient_norm {
            stalled += 1;
        } else {
            stalled = 0;
        }
        gradient_norm = new_norm;
        if stalled >= STALL_LIMIT {
            infeasible = true;
            break;
        }
    }
    if !converged && !infeasible && gradient_norm <= tolerance {
        converged = true;
    }

    Ok(CalibrationSolution {
        lambda,
        iterations,
        final_residual_inf: gradient_norm,
        objective_value: objective,
        converged,
        infeasible,
        jittered_steps,
        column_labels: system.column_labels.clone(),
    })
}

/// Apply a solved tilt: calibrated weights `w⋆ = w₀ ∘ exp(Kλ)`.
///
/// Every weight the matrix defines must appear in the system's rows (and
/// vice versa); positivity carries over since the multiplier is an
/// exponential.
pub fn apply(
    w0: &WeightMatrix,
    system: &RestrictionSystem,
    lambda: &Array1<f64>,
) -> Result<WeightMatrix> {
    if lambda.len() != system.r() {
        return Err(Error::validation(format!(
            "multiplier vector has {} entries but the system has {} restrictions",
            lambda.len(),
            system.r()
        )));
    }
    let n = w0.n();
    let t = w0.t();
    if system.m() != w0.defined_count() {
        return Err(Error::validation(format!(
            "the restriction system calibrates {} weights but the matrix defines {}",
            system.m(),
            w0.defined_count()
        )));
    }
    let mut values = vec![f64::NAN; n * t];
    let mut mask = vec![0u8; n * t];
    for i in 0..n {
        for j in 1..=t {
            if w0.defined(i, j) {
                values[i * t + j - 1] = w0.value(i, j);
                mask[i * t + j - 1] = 1;
            }
        }
    }
    for (ridx, &(i, j)) in system.row_index.iter().enumerate() {
        if i >= n || j < 1 || j > t || mask[i * t + j - 1] == 0 {
            return Err(Error::validation(format!(
                "restriction row (subject index {i}, visit {j}) has no defined weight"
            )));
        }
        let eta: f64 = (0..system.r()).map(|q| system.k[[ridx, q]] * lambda[q]).sum();
        if eta.abs() > EXP_ARG_BOUND {
            return Err(Error::numerical(format!(
                "calibration tilt exponent {eta:.3} overflows at subject index {i}, visit {j}"
            )));
        }
        values[i * t + j - 1] *= eta.exp();
    }
    let mut provenance = w0.provenance.clone();
    provenance.notes.push(format!(
        "calibrated: exp(K lambda) over {} restrictions, max |lambda| = {:.6e}",
        system.r(),
        linalg::inf_norm(lambda)
    ));
    WeightMatrix::from_values(n, t, values, mask, WeightKind::Calibrated, provenance)
}

/// Balance diagnostics for a weight matrix against a restriction system.
#[derive(Debug, Clone)]
pub struct ImbalanceReport {
    /// Restriction labels, aligned with `scaled_residuals`.
    pub labels: Vec<String>,
    /// `(Kᵀw − l)/m` per restriction: zero exactly when the balance holds.
    pub scaled_residuals: Array1<f64>,
    /// Mean of the multipliers `exp(Kλ)`, when multipliers were supplied.
    pub multiplier_mean: Option<f64>,
    /// Sample standard deviation of the multipliers.
    pub multiplier_sd: Option<f64>,
}

impl ImbalanceReport {
    pub fn max_abs_residual(&self) -> f64 {
        linalg::inf_norm(&self.scaled_residuals)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let residuals: Vec<serde_json::Value> = self
            .labels
            .iter()
            .zip(self.scaled_residuals.iter())
            .map(|(label, value)| json!({ "label": label, "scaled_residual": value }))
            .collect();
        json!({
            "scaled_residuals": residuals,
            "max_abs_residual": self.max_abs_residual(),
            "multiplier_mean": self.multiplier_mean,
            "multiplier_sd": self.multiplier_sd,
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let csv_err = |e: csv::Error| Error::parse(format!("csv write failed: {e}"));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "scaled_residual"]).map_err(csv_err)?;
        for (label, value) in self.labels.iter().zip(self.scaled_residuals.iter()) {
            w.write_record([label.as_str(), &format!("{value}")]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_csv(file)
    }
}

/// Per-restriction scaled residuals `(Kᵀw − l)/m` for the weights in `w`,
/// plus multiplier summary statistics when `lambda` is given.
pub fn imbalance(
    w: &WeightMatrix,
    system: &RestrictionSystem,
    lambda: Option<&Array1<f64>>,
) -> Result<ImbalanceReport> {
    let values = w.values_for(&system.row_index);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(
            "weight matrix does not define every calibrated row",
        ));
    }
    let m = system.m().max(1) as f64;
    let scaled = system.residual(&values) / m;
    let (mean, sd) = match lambda {
        Some(lam) => {
            if lam.len() != system.r() {
                return Err(Error::validation(format!(
                    "multiplier vector has {} entries but the system has {} restrictions",
                    lam.len(),
                    system.r()
                )));
            }
            let tilts = system.k.dot(lam).mapv(f64::exp);
            let mean = tilts.mean().unwrap_or(1.0);
            let sd = if tilts.len() > 1 {
                let var = tilts.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (tilts.len() - 1) as f64;
                var.sqrt()
            } else {
                0.0
            };
            (Some(mean), Some(sd))
        }
        None => (None, None),
    };
    Ok(ImbalanceReport {
        labels: system.column_labels.clone(),
        scaled_residuals: scaled,
        multiplier_mean: mean,
        multiplier_sd: sd,
    })
}

/// Convenience wrapper: extract the initial weights along the system's rows,
/// solve, and apply, returning the calibrated matrix with the solution.
pub fn calibrate_weights(
    _data: &LongitudinalDataset,
    w0: &WeightMatrix,
    system: &RestrictionSystem,
    options: &SolveOptions,
) -> Result<(WeightMatrix, CalibrationSolution)> {
    let initial = w0.values_for(&system.row_index);
    if initial.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(
            "weight matrix does not define every calibrated row",
        ));
    }
    let solution = solve(&initial, system, options)?;
    let calibrated = apply(w0, system, &solution.lambda)?;
    Ok((calibrated, solution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::restrictions::{normalization_restrictions, RestrictionFamily};
    use crate::weights::Provenance;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn system_from(k: Array2<f64>, l: Array1<f64>) -> RestrictionSystem {
        let m = k.nrows();
        let r = k.ncols();
        RestrictionSystem {
            k,
            l,
            row_index: (0..m).map(|i| (i, 1)).collect(),
            column_labels: (0..r).map(|q| format!("c{q}")).collect(),
            families: vec![RestrictionFamily::Treatment; r],
            probe_spec: vec!["test".into()],
        }
    }

    #[test]
    fn objective_at_zero_is_weight_total() {
        let w0 = array![1.0, 2.0, 3.0];
        let k = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let l = array![2.0, 4.0];
        let (obj, grad, hess) =
            objective_grad_hess(&w0, &k, &l, &Array1::zeros(2)).unwrap();
        assert_abs_diff_eq!(obj, 6.0, epsilon = 1e-12);
        // gradient = Kᵀw0 − l = (4, 5) − (2, 4)
        assert_abs_diff_eq!(grad[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[1], 1.0, epsilon = 1e-12);
        // Hessian = Kᵀ diag(w0) K, symmetric
        assert_abs_diff_eq!(hess[[0, 0]], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hess[[0, 1]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hess[[1, 0]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hess[[1, 1]], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn objective_closed_form_single_column() {
        let w0 = array![1.0, 1.0];
        let k = array![[1.0], [1.0]];
        let l = array![2.0];
        let lambda = array![2.0f64.ln()];
        let (obj, grad, _) = objective_grad_hess(&w0, &k, &l, &lambda).unwrap();
        assert_abs_diff_eq!(obj, 4.0 - 2.0 * 2.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(grad[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn satisfied_system_converges_immediately() {
        let w0 = array![1.0, 1.0, 1.0];
        let sys = system_from(array![[1.0], [1.0], [1.0]], array![3.0]);
        let sol = solve(&w0, &sys, &SolveOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(!sol.infeasible);
        assert_eq!(sol.iterations, 0);
        assert_abs_diff_eq!(sol.lambda[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn indicator_column_matches_analytic_multiplier() {
        // K ∈ {0,1}: the tilt only moves rows with K = 1, so
        // λ = log(l / Σ_{K=1} w0)
        let w0 = array![1.0, 2.0, 3.0, 4.0];
        let sys = system_from(array![[1.0], [0.0], [1.0], [0.0]], array![2.0]);
        let sol = solve(&w0, &sys, &SolveOptions::default()).unwrap();
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.lambda[0], (2.0f64 / 4.0).ln(), epsilon = 1e-10);
        assert!(sol.final_residual_inf <= 1e-8 * 2.0);
    }

    #[test]
    fn apply_identity_and_ratio_multipliers() {
        let w0 = WeightMatrix::from_values(
            1,
            1,
            vec![5.0],
            vec![1],
            WeightKind::Joint,
            Provenance::default(),
        )
        .unwrap();
        let sys = system_from(array![[1.0, -1.0]], array![0.0]);
        let same = apply(&w0, &sys, &Array1::zeros(2)).unwrap();
        assert_abs_diff_eq!(same.value(0, 1), 5.0, epsilon = 1e-15);
        assert_eq!(same.kind, WeightKind::Calibrated);
        let tilted = apply(&w0, &sys, &array![2.0f64.ln(), 3.0f64.ln()]).unwrap();
        assert_abs_diff_eq!(tilted.value(0, 1), 5.0 * 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn normalization_calibration_pins_per_visit_means() {
        // 3 subjects × 2 visits with uneven weights; per-visit mean-one
        // normalization must drive each visit's mean to exactly one
        let rows: Vec<(usize, usize)> = (0..3).flat_map(|i| [(i, 1), (i, 2)]).collect();
        let sys = normalization_restrictions(&rows, true);
        let values = vec![0.5, 1.0, 2.0, 4.0, 1.5, 0.25];
        let w0 = WeightMatrix::from_values(
            3,
            2,
            values,
            vec![1; 6],
            WeightKind::Joint,
            Provenance::default(),
        )
        .unwrap();
        let initial = w0.values_for(&rows);
        let sol = solve(&initial, &sys, &SolveOptions::default()).unwrap();
        assert!(sol.converged, "normalization solve should converge");
        let calibrated = apply(&w0, &sys, &sol.lambda).unwrap();
        for j in 1..=2 {
            let mean: f64 = (0..3).map(|i| calibrated.value(i, j)).sum::<f64>() / 3.0;
            assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-8);
        }
        let report = imbalance(&calibrated, &sys, Some(&sol.lambda)).unwrap();
        assert!(report.max_abs_residual() <= 1e-8);
        assert!(report.multiplier_sd.unwrap() > 0.0);
    }

    #[test]
    fn unreachable_target_reports_infeasible() {
        // K has strictly positive entries but the target is negative: the
        // tilted total can approach zero yet never reach −1, so the
        // objective is unbounded below
        let w0 = array![1.0, 1.0];
        let sys = system_from(array![[1.0], [1.0]], array![-1.0]);
        let sol = solve(&w0, &sys, &SolveOptions::default()).unwrap();
        assert!(sol.infeasible);
        assert!(!sol.converged);
    }

    #[test]
    fn zero_multiplier_summary_is_degenerate() {
        let rows = vec![(0, 1), (1, 1)];
        let sys = normalization_restrictions(&rows, false);
        let w0 = WeightMatrix::from_values(
            2,
            1,
            vec![1.0, 3.0],
            vec![1, 1],
            WeightKind::Joint,
            Provenance::default(),
        )
        .unwrap();
        let report = imbalance(&w0, &sys, Some(&Array1::zeros(1))).unwrap();
        assert_abs_diff_eq!(report.multiplier_mean.unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(report.multiplier_sd.unwrap(), 0.0, epsilon = 1e-15);
        // residual (Kᵀw − l)/m = (4 − 2)/2
        assert_abs_diff_eq!(report.scaled_residuals[0], 1.0, epsilon = 1e-12);
    }
}
