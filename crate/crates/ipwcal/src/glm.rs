//! Maximum-likelihood fitters for the treatment and censoring models.
//!
//! Two families cover every model the pipeline needs: weighted logistic
//! regression (treatment indicators, retention/censoring) and a
//! heteroscedastic normal linear model for continuous treatments, where both
//! the mean and the log-variance are linear in covariates.
//!
//! Both fitters use Newton–Raphson from a zero start with step-halving (a
//! step is halved until the log-likelihood does not worsen, at most
//! [`MAX_HALVINGS`] times) and are fully deterministic.

use ndarray::{Array1, Array2};
use serde_json::json;

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::linalg;

/// Score convergence tolerance (max-abs) for logistic fits.
pub const LOGISTIC_TOL: f64 = 1e-10;
/// Score convergence tolerance (max-abs) for heteroscedastic normal fits.
pub const HETNORMAL_TOL: f64 = 1e-8;
/// Iteration cap for both fitters.
pub const MAX_ITERATIONS: usize = 100;
/// Step-halving cap inside one Newton iteration.
pub const MAX_HALVINGS: usize = 30;
/// Fitted probabilities are kept in [CLAMP, 1 − CLAMP] before any division.
pub const PROB_CLAMP: f64 = 1e-12;
/// |coefficient| beyond this flags quasi-separation.
pub const SEPARATION_BOUND: f64 = 15.0;
/// Fitted log-variances below this abort the heteroscedastic fit.
pub const LOGVAR_FLOOR: f64 = -30.0;

/// A fitted logistic regression.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    /// Design column names, in design order.
    pub names: Vec<String>,
    pub coefficients: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max-abs component of the score at the returned coefficients.
    pub max_abs_score: f64,
    /// Some coefficient exceeded [`SEPARATION_BOUND`] in absolute value;
    /// the fit is returned but probabilities may be saturated.
    pub quasi_separated: bool,
}

impl LogisticFit {
    /// Serialize as a coefficient map plus diagnostics.
    pub fn to_json(&self) -> serde_json::Value {
        let coef: serde_json::Map<String, serde_json::Value> = self
            .names
            .iter()
            .zip(self.coefficients.iter())
            .map(|(n, c)| (n.clone(), json!(c)))
            .collect();
        json!({
            "family": "logistic",
            "coefficients": coef,
            "converged": self.converged,
            "iterations": self.iterations,
            "max_abs_score": self.max_abs_score,
            "quasi_separated": self.quasi_separated,
        })
    }
}

/// A fitted heteroscedastic normal linear model:
/// `a ~ N(X_mu · mean_coefficients, exp(X_sigma · logvar_coefficients))`.
#[derive(Debug, Clone)]
pub struct HetNormalFit {
    pub mean_names: Vec<String>,
    pub mean_coefficients: Array1<f64>,
    pub logvar_names: Vec<String>,
    pub logvar_coefficients: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_score: f64,
}

impl HetNormalFit {
    pub fn to_json(&self) -> serde_json::Value {
        let mean: serde_json::Map<String, serde_json::Value> = self
            .mean_names
            .iter()
            .zip(self.mean_coefficients.iter())
            .map(|(n, c)| (n.clone(), json!(c)))
            .collect();
        let logvar: serde_json::Map<String, serde_json::Value> = self
            .logvar_names
            .iter()
            .zip(self.logvar_coefficients.iter())
            .map(|(n, c)| (n.clone(), json!(c)))
            .collect();
        json!({
            "family": "heteroscedastic_normal",
            "mean_coefficients": mean,
            "logvar_coefficients": logvar,
            "converged": self.converged,
            "iterations": self.iterations,
            "max_abs_score": self.max_abs_score,
        })
    }
}

pub(crate) fn check_full_rank(x: &DesignMatrix, row_weights: Option<&Array1<f64>>) -> Result<()> {
    // Rank is checked on the rows that actually enter the likelihood.
    let work = match row_weights {
        None => x.x.clone(),
        Some(w) => {
            let mut m = x.x.clone();
            for (mut row, &wi) in m.rows_mut().into_iter().zip(w.iter()) {
                if wi == 0.0 {
                    row.fill(0.0);
                }
            }
            m
        }
    };
    let rank = linalg::column_rank(&work, 1e-10);
    if rank.rank < x.ncols() {
        let dropped: Vec<&str> = rank.dropped.iter().map(|&c| x.names[c].as_str()).collect();
        return Err(Error::numerical(format!(
            "design is rank deficient: columns [{}] are linearly dependent on the others",
            dropped.join(", ")
        )));
    }
    Ok(())
}

/// Fit a logistic regression of the 0/1 response `y` on `x`, optionally with
/// nonnegative per-row prior weights. Coefficients solve the weighted score
/// equations `Σ wᵢ (yᵢ − pᵢ) xᵢ = 0` to max-abs [`LOGISTIC_TOL`].
pub fn fit_logistic(
    x: &DesignMatrix,
    y: &Array1<f64>,
    prior_weights: Option<&Array1<f64>>,
) -> Result<LogisticFit> {
    let m = x.nrows();
    let p = x.ncols();
    if y.len() != m {
        return Err(Error::validation(format!(
            "response has {} rows but the design has {m}",
            y.len()
        )));
    }
    if let Some(v) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::validation(format!("logistic response must be 0 or 1, found {v}")));
    }
    if let Some(w) = prior_weights {
        if w.len() != m {
            return Err(Error::validation(format!(
                "prior weights have {} rows but the design has {m}",
                w.len()
            )));
        }
        if let Some(v) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::validation(format!("prior weights must be nonnegative, found {v}")));
        }
    }
    check_full_rank(x, prior_weights)?;

    let weight = |i: usize| prior_weights.map_or(1.0, |w| w[i]);
    // Weighted log-likelihood Σ wᵢ [yᵢηᵢ − ln(1 + exp ηᵢ)], computed with
    // the stable softplus form.
    let loglik = |b: &Array1<f64>| -> f64 {
        let mut ll = 0.0;
        for i in 0..m {
            let eta: f64 = x.x.row(i).dot(b);
            ll += weight(i) * (y[i] * eta - softplus(eta));
        }
        ll
    };

    let mut b = Array1::<f64>::zeros(p);
    let mut ll = loglik(&b);
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..MAX_ITERATIONS {
        // Score and Hessian at b.
        let mut g = Array1::<f64>::zeros(p);
        let mut h = Array2::<f64>::zeros((p, p));
        for i in 0..m {
            let wi = weight(i);
            if wi == 0.0 {
                continue;
            }
            let eta: f64 = x.x.row(i).dot(&b);
            let pi = expit(eta);
            let resid = wi * (y[i] - pi);
            let curv = wi * pi * (1.0 - pi);
            for a in 0..p {
                let xa = x.x[(i, a)];
                g[a] += resid * xa;
                for c in a..p {
                    h[(a, c)] += curv * xa * x.x[(i, c)];
                }
            }
        }
        for a in 0..p {
            for c in 0..a {
                h[(a, c)] = h[(c, a)];
            }
        }
        if linalg::inf_norm(&g) <= LOGISTIC_TOL {
            converged = true;
            break;
        }
        let dir = linalg::solve_spd(&h, &g).or_else(|_| linalg::solve_general(&h, &g))?;
        iterations += 1;

        // Step-halving: accept the first step that does not worsen the
        // log-likelihood.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &b + &(t * &dir);
            let cand_ll = loglik(&cand);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-14 * ll.abs().max(1.0) {
                b = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break; // stalled: no step improves the objective
        }
    }
    // Report the score at the coefficients actually returned (the loop may
    // have stepped after its last convergence check).
    let max_abs_score = {
        let mut g = Array1::<f64>::zeros(p);
        for i in 0..m {
            let eta: f64 = x.x.row(i).dot(&b);
            let resid = weight(i) * (y[i] - expit(eta));
            for c in 0..p {
                g[c] += resid * x.x[(i, c)];
            }
        }
        linalg::inf_norm(&g)
    };
    if max_abs_score <= LOGISTIC_TOL {
        converged = true;
    }
    let quasi_separated = b.iter().any(|c| c.abs() > SEPARATION_BOUND);
    Ok(LogisticFit {
        names: x.names.clone(),
        coefficients: b,
        converged,
        iterations,
        max_abs_score,
        quasi_separated,
    })
}

/// Fitted probabilities on a design with the same columns as the fit,
/// clamped to `[1e-12, 1 − 1e-12]` so downstream division is safe.
pub fn predict_prob(fit: &LogisticFit, x: &DesignMatrix) -> Result<Array1<f64>> {
    if fit.names != x.names {
        return Err(Error::validation(format!(
            "design columns [{}] do not match fitted columns [{}]",
            x.names.join(", "),
            fit.names.join(", ")
        )));
    }
    let mut out = Array1::<f64>::zeros(x.nrows());
    for i in 0..x.nrows() {
        let eta: f64 = x.x.row(i).dot(&fit.coefficients);
        out[i] = expit(eta).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    }
    Ok(out)
}

/// Fit the heteroscedastic normal model by alternating exact weighted
/// least squares for the mean block with Newton steps for the log-variance
/// block, until both score systems are below [`HETNORMAL_TOL`] in max-abs.
pub fn fit_hetnormal(
    x_mu: &DesignMatrix,
    x_sigma: &DesignMatrix,
    a: &Array1<f64>,
) -> Result<HetNormalFit> {
    let m = a.len();
    if x_mu.nrows() != m || x_sigma.nrows() != m {
        return Err(Error::validation(format!(
            "designs have {} and {} rows but the response has {m}",
            x_mu.nrows(),
            x_sigma.nrows()
        )));
    }
    check_full_rank(x_mu, None)?;
    check_full_rank(x_sigma, None)?;
    let p_mu = x_mu.ncols();
    let p_sig = x_sigma.ncols();

    let mut beta_mu = Array1::<f64>::zeros(p_mu);
    let mut beta_sig = Array1::<f64>::zeros(p_sig);

    // −2·log-likelihood up to a constant: Σ [ln σ²ᵢ + dᵢ²/σ²ᵢ].
    let deviance = |bm: &Array1<f64>, bs: &Array1<f64>| -> Result<f64> {
        let mut dev = 0.0;
        for i in 0..m {
            let logvar: f64 = x_sigma.x.row(i).dot(bs);
            if logvar < LOGVAR_FLOOR {
                return Err(Error::numerical(format!(
                    "degenerate variance: fitted log-variance {logvar:.2} fell below {LOGVAR_FLOOR}"
                )));
            }
            let d = a[i] - x_mu.x.row(i).dot(bm);
            dev += logvar + d * d * (-logvar).exp();
        }
        Ok(dev)
    };

    let mut dev = deviance(&beta_mu, &beta_sig)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut max_abs_score = f64::INFINITY;

    for _ in 0..MAX_ITERATIONS {
        // Precision weights at the current variance model.
        let inv_var: Array1<f64> = (0..m)
            .map(|i| (-x_sigma.x.row(i).dot(&beta_sig)).exp())
            .collect();

        // Mean block: exact conditional maximizer (WLS with weights 1/σ²).
        let new_mu = linalg::solve_wls(&x_mu.x, a, &inv_var)?;

        // Log-variance block: one Newton step with step-halving on the
        // joint deviance. Score ½Σ(dᵢ²/σ²ᵢ − 1)xᵢ, Hessian ½Σ(dᵢ²/σ²ᵢ)xᵢxᵢᵀ.
        let mut g = Array1::<f64>::zeros(p_sig);
        let mut h = Array2::<f64>::zeros((p_sig, p_sig));
        for i in 0..m {
            let d = a[i] - x_mu.x.row(i).dot(&new_mu);
            let ratio = d * d * inv_var[i];
            for c in 0..p_sig {
                let xc = x_sigma.x[(i, c)];
                g[c] += 0.5 * (ratio - 1.0) * xc;
                for e in c..p_sig {
                    h[(c, e)] += 0.5 * ratio * xc * x_sigma.x[(i, e)];
                }
            }
        }
        for c in 0..p_sig {
            for e in 0..c {
                h[(c, e)] = h[(e, c)];
            }
        }
        let dir = linalg::solve_spd(&h, &g).or_else(|_| linalg::solve_general(&h, &g))?;
        iterations += 1;

        let mut t = 1.0;
        let mut stepped = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta_sig + &(t * &dir);
            match deviance(&new_mu, &cand) {
                Err(e) => {
                    // A full step may overshoot into degenerate variance; a
                    // shorter one can still be fine. Only give up at t ≈ 0.
                    if t < 1e-9 {
                        return Err(e);
                    }
                }
                Ok(cand_dev) => {
                    if cand_dev <= dev + 1e-12 * dev.abs().max(1.0) {
                        beta_sig = cand;
                        dev = cand_dev;
                        stepped = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        beta_mu = new_mu;
        if !stepped {
            dev = deviance(&beta_mu, &beta_sig)?;
        }

        // Joint score at the updated coefficients.
        let mut score_max = 0.0f64;
        let mut g_mu = Array1::<f64>::zeros(p_mu);
        let mut g_sig = Array1::<f64>::zeros(p_sig);
        for i in 0..m {
            let logvar: f64 = x_sigma.x.row(i).dot(&beta_sig);
            let inv = (-logvar).exp();
            let d = a[i] - x_mu.x.row(i).dot(&beta_mu);
            for c in 0..p_mu {
                g_mu[c] += d * inv * x_mu.x[(i, c)];
            }
            for c in 0..p_sig {
                g_sig[c] += 0.5 * (d * d * inv - 1.0) * x_sigma.x[(i, c)];
            }
        }
        score_max = score_max.max(linalg::inf_norm(&g_mu)).max(linalg::inf_norm(&g_sig));
        max_abs_score = score_max;
        if score_max <= HETNORMAL_TOL {
            converged = true;
            break;
        }
        if !stepped {
            break; // no usable step and score still large: stalled
        }
    }

    Ok(HetNormalFit {
        mean_names: x_mu.names.clone(),
        mean_coefficients: beta_mu,
        logvar_names: x_sigma.names.clone(),
        logvar_coefficients: beta_sig,
        converged,
        iterations,
        max_abs_score,
    })
}

/// Fitted means on a design matching the fit's mean columns.
pub fn predict_mean(fit: &HetNormalFit, x_mu: &DesignMatrix) -> Result<Array1<f64>> {
    if fit.mean_names != x_mu.names {
        return Err(Error::validation(format!(
            "design columns [{}] do not match fitted mean columns [{}]",
            x_mu.names.join(", "),
            fit.mean_names.join(", ")
        )));
    }
    Ok((0..x_mu.nrows()).map(|i| x_mu.x.row(i).dot(&fit.mean_coefficients)).collect())
}

/// Fitted variances on a design matching the fit's log-variance columns.
pub fn predict_variance(fit: &HetNormalFit, x_sigma: &DesignMatrix) -> Result<Array1<f64>> {
    if fit.logvar_names != x_sigma.names {
        return Err(Error::validation(format!(
            "design columns [{}] do not match fitted log-variance columns [{}]",
            x_sigma.names.join(", "),
            fit.logvar_names.join(", ")
        )));
    }
    Ok((0..x_sigma.nrows())
        .map(|i| x_sigma.x.row(i).dot(&fit.logvar_coefficients).exp())
        .collect())
}

/// Numerically stable 1/(1+exp(−η)).
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1+exp(η)).
fn softplus(eta: f64) -> f64 {
    if eta > 30.0 {
        eta
    } else {
        eta.exp().ln_1p()
    }
}
