//! Calibrated inverse-probability weighting for marginal structural models.
//!
//! This crate estimates the effect of a time-varying treatment on a
//! longitudinal outcome in the presence of time-varying confounding and
//! dropout. The pipeline is:
//!
//! 1. Fit parametric treatment and censoring models by maximum likelihood
//!    ([`glm`]) and form stabilized inverse-probability-of-treatment and
//!    inverse-probability-of-censoring weights ([`weights`]).
//! 2. Build a linear restriction system `Kᵀw = l` encoding covariate balance
//!    for treatment assignment and sample representativeness under dropout
//!    ([`restrictions`]).
//! 3. Calibrate the initial weights by exponential tilting, `w⋆ = w ∘ exp(Kλ)`,
//!    solving a convex dual problem so the restrictions hold exactly in the
//!    sample ([`calibrate`]).
//! 4. Fit the marginal structural model by weighted estimating equations and
//!    obtain standard errors by subject-level bootstrap ([`msm`]).
//!
//! A simulation harness ([`simulate`]) generates longitudinal cohorts with
//! known treatment effects and runs replication studies comparing calibrated
//! and uncalibrated estimators.

pub mod calibrate;
pub mod config;
pub mod dataset;
pub mod design;
pub mod error;
pub mod formula;
pub mod glm;
pub mod linalg;
pub mod msm;
pub mod restrictions;
pub mod rng;
pub mod simulate;
pub mod weights;

pub use dataset::{LongitudinalDataset, Schema, TreatmentKind};
pub use design::{build_design, lag, DesignMatrix, DesignSpec};
pub use error::{Error, Result};
pub use formula::Formula;
