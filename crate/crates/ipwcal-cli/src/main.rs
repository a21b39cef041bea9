//! Command-line front end for calibrated inverse-probability weighting.
//!
//! Six subcommands cover the pipeline: `simulate` runs the replication
//! study; `fit-weights` fits treatment (and optionally censoring) models
//! and writes inverse-probability weights; `calibrate` adjusts a weight
//! file so balance restrictions hold exactly; `fit-msm` fits the weighted
//! marginal model; `bootstrap` resamples subjects and reruns the whole
//! pipeline for standard errors; `diagnose` reports restriction residuals
//! for an existing weight file.
//!
//! Every setting can come from a `--config key = value` file, with
//! command-line flags taking precedence. Each run writes a manifest
//! (command, tool version, and the full effective settings) next to its
//! primary output; re-running with the manifest's settings reproduces the
//! outputs byte for byte. Exit codes: 0 success, 2 usage, 3 data or
//! validation error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use ipwcal::calibrate::{self, SolveOptions};
use ipwcal::config::{self, ConfigMap};
use ipwcal::dataset::{self, LongitudinalDataset, TreatmentKind};
use ipwcal::design::DesignSpec;
use ipwcal::error::{Error, Result};
use ipwcal::msm::{self, MsmEstimate, MsmSpec};
use ipwcal::restrictions::{self, CensoringTarget, RestrictionSystem};
use ipwcal::rng;
use ipwcal::simulate;
use ipwcal::weights::{self, Scaling, TreatmentSpecs, WeightMatrix};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ipwcal",
    version,
    about = "Joint calibrated inverse-probability weighting for longitudinal marginal models",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Key = value settings file; explicit flags override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for replicate and bootstrap parallelism
    /// (results are identical for every setting; default 1).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the replication study: generate cohorts, fit both estimators,
    /// tabulate bias/SD/RMSE against the known true contrasts.
    Simulate(SimulateArgs),
    /// Fit treatment (and optionally retention) models and write
    /// inverse-probability weights.
    FitWeights(FitWeightsArgs),
    /// Calibrate a weight file so the requested balance restrictions hold
    /// exactly.
    Calibrate(CalibrateArgs),
    /// Fit the weighted marginal outcome model.
    FitMsm(FitMsmArgs),
    /// Nonparametric bootstrap over subjects: rerun the full pipeline per
    /// resample and report standard errors.
    Bootstrap(BootstrapArgs),
    /// Report restriction residuals for an existing weight file.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Subjects per cohort (required here or in --config).
    #[arg(long)]
    n: Option<usize>,
    /// Censoring scenario: none/1 or covariate_dependent/2.
    #[arg(long)]
    scenario: Option<String>,
    /// Covariate set for the fitted models: correct or transformed.
    #[arg(long)]
    covariates: Option<String>,
    /// Follow-up visits after baseline.
    #[arg(long)]
    visits: Option<usize>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of generated cohorts.
    #[arg(long)]
    replicates: Option<usize>,
    /// Outcome noise standard deviation.
    #[arg(long)]
    outcome_sd: Option<f64>,
    /// Comma-separated estimators to compare: mle, cmle.
    #[arg(long)]
    estimators: Option<String>,
    /// Summary table CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the summary (with failures) as JSON.
    #[arg(long)]
    json_out: Option<PathBuf>,
    /// Write the study's first generated cohort to this CSV.
    #[arg(long)]
    emit_cohort: Option<PathBuf>,
}

#[derive(Args)]
struct WeightModelArgs {
    /// Stabilizing treatment-model formula (history-only numerator).
    #[arg(long)]
    numerator: Option<String>,
    /// Treatment-model formula for the denominator (history + covariates).
    #[arg(long)]
    denominator: Option<String>,
    /// Scale formula for a continuous-treatment numerator.
    #[arg(long)]
    sigma_numerator: Option<String>,
    /// Scale formula for a continuous-treatment denominator.
    #[arg(long)]
    sigma_denominator: Option<String>,
    /// Retention-model formula; when given, censoring weights multiply
    /// the treatment weights.
    #[arg(long)]
    censoring_model: Option<String>,
    /// Retention-numerator formula for stabilized censoring weights.
    #[arg(long)]
    censoring_stabilizer: Option<String>,
    /// Weight scaling: none, per_visit_to_n, or total_to_nt.
    #[arg(long)]
    scaling: Option<String>,
}

#[derive(Args)]
struct RestrictionArgs {
    /// Comma-separated restriction families: treatment, censoring,
    /// normalization.
    #[arg(long)]
    restrictions: Option<String>,
    /// Probe formula for treatment-balance restrictions.
    #[arg(long)]
    probe: Option<String>,
    /// Probe formula for the conditional (intensified) treatment level;
    /// defaults to --probe.
    #[arg(long)]
    probe1: Option<String>,
    /// Scale probe formula for continuous treatments; defaults to --probe.
    #[arg(long)]
    sigma_probe: Option<String>,
    /// Probe formula for censoring restrictions.
    #[arg(long)]
    censoring_probe: Option<String>,
    /// Censoring-restriction target: repeated or eventual.
    #[arg(long)]
    censoring_target: Option<String>,
    /// Retention-numerator formula for stabilized censoring restrictions.
    #[arg(long)]
    censoring_probe_stabilizer: Option<String>,
    /// Normalization granularity: per_visit or total.
    #[arg(long)]
    normalization: Option<String>,
    /// Keep normalization restrictions even when censoring restrictions
    /// already pin the per-visit totals.
    #[arg(long)]
    keep_redundant_normalization: bool,
}

#[derive(Args)]
struct FitWeightsArgs {
    /// Input dataset CSV (long format).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    model: WeightModelArgs,
    /// Output weights CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Input dataset CSV (long format).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Input weights CSV to calibrate.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Stabilizing treatment-model formula, refit to supply the expected
    /// assignments inside treatment restrictions.
    #[arg(long)]
    numerator: Option<String>,
    /// Scale formula for a continuous-treatment numerator.
    #[arg(long)]
    sigma_numerator: Option<String>,
    #[command(flatten)]
    restriction: RestrictionArgs,
    /// Maximum solver iterations.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Convergence tolerance on the scaled residual norm.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Output calibrated weights CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Solver solution JSON path (multipliers, iterations, residual).
    #[arg(long)]
    solution: Option<PathBuf>,
    /// Before/after restriction residual CSV path.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct MsmModelArgs {
    /// Outcome-model formula (e.g. "1 + cumdiff + cuma1").
    #[arg(long)]
    outcome: Option<String>,
    /// Response column for the outcome model.
    #[arg(long)]
    response: Option<String>,
    /// Comma-separated labels of the treatment-exposure columns.
    #[arg(long)]
    treatment_terms: Option<String>,
    /// Derived-column recipes applied before fitting, e.g.
    /// "a01diff = a0 - a1; cumdiff = cumsum(a01diff)".
    #[arg(long)]
    derive: Option<String>,
}

#[derive(Args)]
struct FitMsmArgs {
    /// Input dataset CSV (long format).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Input weights CSV.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    msm: MsmModelArgs,
    /// Estimate CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Estimate JSON path.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Input dataset CSV (long format).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    model: WeightModelArgs,
    /// Calibrate the weights inside each replicate (requires restriction
    /// settings).
    #[arg(long)]
    calibrate: bool,
    #[command(flatten)]
    restriction: RestrictionArgs,
    #[command(flatten)]
    msm: MsmModelArgs,
    /// Bootstrap resamples.
    #[arg(long)]
    replicates: Option<usize>,
    /// RNG seed for resampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Estimate CSV path (with bootstrap standard errors).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Estimate + replicate-diagnostics JSON path.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Input dataset CSV (long format).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Weights CSV to diagnose.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Stabilizing treatment-model formula, refit to supply the expected
    /// assignments inside treatment restrictions.
    #[arg(long)]
    numerator: Option<String>,
    /// Scale formula for a continuous-treatment numerator.
    #[arg(long)]
    sigma_numerator: Option<String>,
    #[command(flatten)]
    restriction: RestrictionArgs,
    /// Residual report CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Residual report JSON path.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            // --help/--version are successful exits; anything else is a
            // usage error.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            match e.category() {
                "numerical" => ExitCode::from(EXIT_NUMERICAL),
                _ => ExitCode::from(EXIT_DATA),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(path) => ConfigMap::from_path(path)?,
        None => ConfigMap::new(),
    };
    match cli.command {
        Command::Simulate(args) => run_simulate(base, cli.jobs, args),
        Command::FitWeights(args) => run_fit_weights(base, cli.jobs, args),
        Command::Calibrate(args) => run_calibrate(base, cli.jobs, args),
        Command::FitMsm(args) => run_fit_msm(base, cli.jobs, args),
        Command::Bootstrap(args) => run_bootstrap(base, cli.jobs, args),
        Command::Diagnose(args) => run_diagnose(base, cli.jobs, args),
    }
}

/// Fold an optional flag into the settings map (flags win over the file).
fn fold<T: ToString>(map: &mut ConfigMap, key: &str, flag: &Option<T>) {
    if let Some(value) = flag {
        map.set(key, value.to_string());
    }
}

fn fold_path(map: &mut ConfigMap, key: &str, flag: &Option<PathBuf>) {
    if let Some(value) = flag {
        map.set(key, value.display().to_string());
    }
}

/// Make a default visible in the effective settings (and so in the
/// manifest) when neither file nor flag set it.
fn default_key(map: &mut ConfigMap, key: &str, value: impl ToString) {
    if map.get(key).is_none() {
        map.set(key, value.to_string());
    }
}

fn fold_jobs(map: &mut ConfigMap, jobs: Option<usize>) {
    fold(map, "jobs", &jobs);
    default_key(map, "jobs", 1);
}

/// Install the requested parallelism as the global thread pool.
fn apply_jobs(map: &ConfigMap) -> Result<()> {
    let jobs: usize = map.get_or("jobs", 1)?;
    if jobs == 0 {
        return Err(Error::validation("setting 'jobs': must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::validation(format!("cannot configure {jobs} worker threads: {e}")))
}

fn path_setting(map: &ConfigMap, key: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(map.require(key)?))
}

fn optional_path(map: &ConfigMap, key: &str) -> Option<PathBuf> {
    map.get(key).map(PathBuf::from)
}

fn load_data(map: &ConfigMap) -> Result<LongitudinalDataset> {
    dataset::load_long_auto(path_setting(map, "data")?)
}

/// The manifest records the command, the tool version, and every
/// effective setting; feeding the settings back as a config file
/// reproduces the run exactly. No timestamps: identical runs must produce
/// identical bytes.
fn write_manifest(primary_out: &Path, command: &str, map: &ConfigMap) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "tool": { "name": "ipwcal", "version": env!("CARGO_PKG_VERSION") },
        "settings": map.to_json(),
    });
    let mut name = primary_out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    let path = primary_out.with_file_name(name);
    write_json(&path, &manifest)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = format!("{:#}\n", value);
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// simulate

fn run_simulate(mut map: ConfigMap, jobs: Option<usize>, args: SimulateArgs) -> Result<()> {
    fold(&mut map, "n", &args.n);
    fold(&mut map, "scenario", &args.scenario);
    fold(&mut map, "covariates", &args.covariates);
    fold(&mut map, "visits", &args.visits);
    fold(&mut map, "seed", &args.seed);
    fold(&mut map, "replicates", &args.replicates);
    fold(&mut map, "outcome_sd", &args.outcome_sd);
    fold(&mut map, "estimators", &args.estimators);
    fold_path(&mut map, "out", &args.out);
    fold_path(&mut map, "json_out", &args.json_out);
    fold_path(&mut map, "emit_cohort", &args.emit_cohort);
    fold_jobs(&mut map, jobs);
    default_key(&mut map, "out", "study_summary.csv");
    default_key(&mut map, "covariates", "correct");
    default_key(&mut map, "visits", config::DEFAULT_VISITS);
    default_key(&mut map, "seed", config::DEFAULT_SEED);
    default_key(&mut map, "outcome_sd", simulate::DEFAULT_OUTCOME_SD);
    default_key(&mut map, "estimators", "mle,cmle");
    let mut known = vec!["out", "json_out", "emit_cohort", "jobs"];
    known.extend_from_slice(config::STUDY_KEYS);
    map.check_known(&known)?;
    apply_jobs(&map)?;

    let scenario = config::scenario_from_config(&map)?;
    let estimators = config::estimators_from_config(&map)?;
    let analysis = simulate::study_analysis();

    if let Some(path) = optional_path(&map, "emit_cohort") {
        let mut first = scenario.clone();
        first.seed = rng::substream_seed(scenario.seed, 1);
        let cohort = simulate::generate_cohort(&first)?;
        cohort.write_long_path(&path)?;
        eprintln!("wrote first study cohort to {}", path.display());
    }

    let summary = simulate::run_study(&scenario, &estimators, &analysis)?;
    let out = path_setting(&map, "out")?;
    summary.write_csv_path(&out)?;
    if let Some(path) = optional_path(&map, "json_out") {
        write_json(&path, &summary.to_json())?;
    }
    write_manifest(&out, "simulate", &map)?;
    print!("{}", summary.format_table());
    eprintln!("wrote study summary to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// shared model builders

const WEIGHT_MODEL_KEYS: &[&str] = &[
    "numerator",
    "denominator",
    "sigma_numerator",
    "sigma_denominator",
    "censoring_model",
    "censoring_stabilizer",
    "scaling",
];

fn fold_weight_model(map: &mut ConfigMap, args: &WeightModelArgs) {
    fold(map, "numerator", &args.numerator);
    fold(map, "denominator", &args.denominator);
    fold(map, "sigma_numerator", &args.sigma_numerator);
    fold(map, "sigma_denominator", &args.sigma_denominator);
    fold(map, "censoring_model", &args.censoring_model);
    fold(map, "censoring_stabilizer", &args.censoring_stabilizer);
    fold(map, "scaling", &args.scaling);
}

/// Treatment-model specs for the dataset's treatment kind. `which` names
/// the settings consulted for the mean and (continuous only) scale
/// formulas.
fn treatment_specs(
    data: &LongitudinalDataset,
    map: &ConfigMap,
    mean_key: &str,
    sigma_key: &str,
) -> Result<TreatmentSpecs> {
    let formula = map.require(mean_key)?;
    Ok(match data.treatment_kind() {
        TreatmentKind::Ordinal3 => TreatmentSpecs::ordinal(formula),
        TreatmentKind::Binary => {
            TreatmentSpecs::Binary { a0: DesignSpec::new(formula, "a0") }
        }
        TreatmentKind::Continuous => TreatmentSpecs::Continuous {
            mu: DesignSpec::new(formula, "a"),
            sigma: DesignSpec::new(map.get(sigma_key).unwrap_or("1"), "a"),
        },
    })
}

/// Fit the configured weight models on `data` and build the initial
/// inverse-probability weights.
fn build_initial_weights(data: &LongitudinalDataset, map: &ConfigMap) -> Result<WeightMatrix> {
    let numerator = weights::fit_treatment_model(
        data,
        &treatment_specs(data, map, "numerator", "sigma_numerator")?,
    )?;
    let denominator = weights::fit_treatment_model(
        data,
        &treatment_specs(data, map, "denominator", "sigma_denominator")?,
    )?;
    let treatment = weights::treatment_weights(data, &numerator, &denominator)?;
    let censor = match map.get("censoring_model") {
        None => None,
        Some(formula) => {
            let model = weights::fit_censoring_model(data, &DesignSpec::new(formula, "r"))?;
            let stabilizer = match map.get("censoring_stabilizer") {
                None => None,
                Some(sf) => {
                    Some(weights::fit_censoring_model(data, &DesignSpec::new(sf, "r"))?)
                }
            };
            Some(weights::censoring_weights(data, &model, stabilizer.as_ref())?)
        }
    };
    let scaling = match map.get("scaling") {
        None => Scaling::None,
        Some(raw) => Scaling::parse(raw)?,
    };
    weights::combine_and_scale(&treatment, censor.as_ref(), scaling)
}

const RESTRICTION_KEYS: &[&str] = &[
    "restrictions",
    "probe",
    "probe1",
    "sigma_probe",
    "censoring_probe",
    "censoring_target",
    "censoring_probe_stabilizer",
    "normalization",
    "keep_redundant_normalization",
];

fn fold_restrictions(map: &mut ConfigMap, args: &RestrictionArgs) {
    fold(map, "restrictions", &args.restrictions);
    fold(map, "probe", &args.probe);
    fold(map, "probe1", &args.probe1);
    fold(map, "sigma_probe", &args.sigma_probe);
    fold(map, "censoring_probe", &args.censoring_probe);
    fold(map, "censoring_target", &args.censoring_target);
    fold(map, "censoring_probe_stabilizer", &args.censoring_probe_stabilizer);
    fold(map, "normalization", &args.normalization);
    if args.keep_redundant_normalization {
        map.set("keep_redundant_normalization", "true");
    }
}

/// Build the configured restriction system over `rows`. The treatment
/// family refits the numerator model named by the `numerator` setting
/// (its predictions supply the balance targets' expected assignments).
fn build_restrictions(
    data: &LongitudinalDataset,
    rows: &[(usize, usize)],
    map: &ConfigMap,
) -> Result<RestrictionSystem> {
    let list = map.get("restrictions").unwrap_or("treatment,normalization");
    let mut systems = Vec::new();
    for family in list.split(',') {
        match family.trim() {
            "treatment" => {
                let numerator = weights::fit_treatment_model(
                    data,
                    &treatment_specs(data, map, "numerator", "sigma_numerator")?,
                )?;
                let probe = map.require("probe")?;
                systems.push(match data.treatment_kind() {
                    TreatmentKind::Continuous => restrictions::continuous_treatment_restrictions(
                        data,
                        rows,
                        &numerator,
                        probe,
                        map.get("sigma_probe").unwrap_or(probe),
                    )?,
                    TreatmentKind::Ordinal3 => restrictions::ordinal_treatment_restrictions(
                        data,
                        rows,
                        &numerator,
                        probe,
                        Some(map.get("probe1").unwrap_or(probe)),
                    )?,
                    TreatmentKind::Binary => restrictions::ordinal_treatment_restrictions(
                        data,
                        rows,
                        &numerator,
                        probe,
                        None,
                    )?,
                });
            }
            "censoring" => {
                let probe = map.require("censoring_probe")?;
                let target = match map.get("censoring_target") {
                    None => CensoringTarget::Repeated,
                    Some(raw) => CensoringTarget::parse(raw)?,
                };
                let stabilizer = match map.get("censoring_probe_stabilizer") {
                    None => None,
                    Some(sf) => {
                        Some(weights::fit_censoring_model(data, &DesignSpec::new(sf, "r"))?)
                    }
                };
                systems.push(restrictions::censoring_restrictions(
                    data,
                    rows,
                    probe,
                    target,
                    stabilizer.as_ref(),
                )?);
            }
            "normalization" => {
                let per_visit = match map.get("normalization") {
                    None | Some("per_visit") => true,
                    Some("total") => false,
                    Some(other) => {
                        return Err(Error::validation(format!(
                            "setting 'normalization': expected per_visit or total, got '{other}'"
                        )))
                    }
                };
                systems.push(restrictions::normalization_restrictions(rows, per_visit));
            }
            other => {
                return Err(Error::validation(format!(
                    "unknown restriction family '{other}' (expected treatment, censoring, normalization)"
                )))
            }
        }
    }
    if systems.is_empty() {
        return Err(Error::validation("setting 'restrictions': empty list"));
    }
    let keep = map.get("keep_redundant_normalization") == Some("true");
    let (joint, pruned) = restrictions::assemble_joint(&systems, !keep)?;
    if !pruned.is_empty() {
        eprintln!("{}", pruned.describe());
    }
    Ok(joint)
}

const MSM_KEYS: &[&str] = &["outcome", "response", "treatment_terms", "derive"];

fn fold_msm(map: &mut ConfigMap, args: &MsmModelArgs) {
    fold(map, "outcome", &args.outcome);
    fold(map, "response", &args.response);
    fold(map, "treatment_terms", &args.treatment_terms);
    fold(map, "derive", &args.derive);
}

fn msm_spec(map: &ConfigMap) -> Result<MsmSpec> {
    let outcome = map.require("outcome")?;
    let response = map.get("response").unwrap_or("y");
    let labels = match map.get("treatment_terms") {
        None => Vec::new(),
        Some(raw) => raw
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
    };
    Ok(MsmSpec {
        outcome_design: DesignSpec::new(outcome, response),
        treatment_term_labels: labels,
    })
}

/// Apply the `derive` setting's recipes, if any.
fn apply_configured_derivations(data: &mut LongitudinalDataset, map: &ConfigMap) -> Result<()> {
    if let Some(text) = map.get("derive") {
        let recipes = config::parse_derivations(text)?;
        data.apply_derivations(&recipes)?;
    }
    Ok(())
}

fn weight_summary_line(w: &WeightMatrix) -> String {
    let rows = w.defined_rows();
    let values = w.values_for(&rows);
    let mean = if rows.is_empty() { f64::NAN } else { values.sum() / rows.len() as f64 };
    format!(
        "{} weights over {} subjects ({} visits), mean {:.6}",
        rows.len(),
        w.n(),
        w.t(),
        mean
    )
}

// ---------------------------------------------------------------------------
// fit-weights

fn run_fit_weights(mut map: ConfigMap, jobs: Option<usize>, args: FitWeightsArgs) -> Result<()> {
    fold_path(&mut map, "data", &args.data);
    fold_weight_model(&mut map, &args.model);
    fold_path(&mut map, "out", &args.out);
    fold_jobs(&mut map, jobs);
    default_key(&mut map, "out", "weights.csv");
    let mut known = vec!["data", "out", "jobs"];
    known.extend_from_slice(WEIGHT_MODEL_KEYS);
    map.check_known(&known)?;
    apply_jobs(&map)?;

    let data = load_data(&map)?;
    let fitted = build_initial_weights(&data, &map)?;
    let out = path_setting(&map, "out")?;
    fitted.write_csv_path(&data, &out)?;
    write_manifest(&out, "fit-weights", &map)?;
    println!("{}", weight_summary_line(&fitted));
    eprintln!("wrote weights to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate

fn run_calibrate(mut map: ConfigMap, jobs: Option<usize>, args: CalibrateArgs) -> Result<()> {
    fold_path(&mut map, "data", &args.data);
    fold_path(&mut map, "weights", &args.weights);
    fold(&mut map, "numerator", &args.numerator);
    fold(&mut map, "sigma_numerator", &args.sigma_numerator);
    fold_restrictions(&mut map, &args.restriction);
    fold(&mut map, "max_iterations", &args.max_iterations);
    fold(&mut map, "tolerance", &args.tolerance);
    fold_path(&mut map, "out", &args.out);
    fold_path(&mut map, "solution", &args.solution);
    fold_path(&mut map, "diagnostics", &args.diagnostics);
    fold_jobs(&mut map, jobs);
    default_key(&mut map, "out", "calibrated_weights.csv");
    let mut known = vec![
        "data",
        "weights",
        "numerator",
        "sigma_numerator",
        "max_iterations",
        "tolerance",
        "out",
        "solution",
        "diagnostics",
        "jobs",
    ];
    known.extend_from_slice(RESTRICTION_KEYS);
    map.check_known(&known)?;
    apply_jobs(&map)?;

    let data = load_data(&map)?;
    let initial = WeightMatrix::read_csv_path(&data, path_setting(&map, "weights")?)?;
    let rows = initial.defined_rows();
    let system = build_restrictions(&data, &rows, &map)?;

    let mut options = SolveOptions::default();
    if let Some(max) = map.get_parsed::<usize>("max_iterations")? {
        options.max_iterations = max;
    }
    if let Some(tol) = map.get_parsed::<f64>("tolerance")? {
        options.tolerance = tol;
    }
    let (calibrated, solution) = calibrate::calibrate_weights(&data, &initial, &system, &options)?;
    if solution.infeasible {
        return Err(Error::numerical(format!(
            "calibration is infeasible: no positive reweighting meets the restrictions \
             (residual {:.3e} after {} iterations)",
            solution.final_residual_inf, solution.iterations
        )));
    }
    if !solution.converged {
        return Err(Error::numerical(format!(
            "calibration did not converge within {} iterations (residual {:.3e}); \
             raise max_iterations or relax the restrictions",
            options.max_iterations, solution.final_residual_inf
        )));
    }

    let out = path_setting(&map, "out")?;
    calibrated.write_csv_path(&data, &out)?;
    if let Some(path) = optional_path(&map, "solution") {
        write_json(&path, &solution.to_json())?;
    }
    if let Some(path) = optional_path(&map, "diagnostics") {
        let before = initial.values_for(&system.row_index);
        let after = calibrated.values_for(&system.row_index);
        system.write_diagnostics_csv_path(&before, &after, &path)?;
    }
    write_manifest(&out, "calibrate", &map)?;
    println!(
        "calibrated {} restrictions in {} iterations; residual {:.3e}",
        system.r(),
        solution.iterations,
        solution.final_residual_inf
    );
    println!("{}", weight_summary_line(&calibrated));
    eprintln!("wrote calibrated weights to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-msm

fn run_fit_msm(mut map: ConfigMap, jobs: Option<usize>, args: FitMsmArgs) -> Result<()> {
    fold_path(&mut map, "data", &args.data);
    fold_path(&mut map, "weights", &args.weights);
    fold_msm(&mut map, &args.msm);
    fold_path(&mut map, "out", &args.out);
    fold_path(&mut map, "json_out", &args.json_out);
    fold_jobs(&mut map, jobs);
    default_key(&mut map, "out", "msm_estimate.csv");
    let mut known = vec!["data", "weights", "out", "json_out", "jobs"];
    known.extend_from_slice(MSM_KEYS);
    map.check_known(&known)?;
    apply_jobs(&map)?;

    let mut data = load_data(&map)?;
    apply_configured_derivations(&mut data, &map)?;
    let w = WeightMatrix::read_csv_path(&data, path_setting(&map, "weights")?)?;
    let spec = msm_spec(&map)?;
    let estimate = msm::fit_msm(&data, &spec, &w)?;

    let out = path_setting(&map, "out")?;
    estimate.write_csv_path(&out)?;
    if let Some(path) = optional_path(&map, "json_out") {
        write_json(&path, &estimate.to_json())?;
    }
    write_manifest(&out, "fit-msm", &map)?;
    print_estimate(&estimate);
    eprintln!("wrote estimate to {}", out.display());
    Ok(())
}

fn print_estimate(estimate: &MsmEstimate) {
    for (name, value) in estimate.names.iter().zip(estimate.coefficients.iter()) {
        match estimate.se(name) {
            Some(se) => println!("{name} = {value:.6} (se {se:.6})"),
            None => println!("{name} = {value:.6}"),
        }
    }
}

// ---------------------------------------------------------------------------
// bootstrap

fn run_bootstrap(mut map: ConfigMap, jobs: Option<usize>, args: BootstrapArgs) -> Result<()> {
    fold_path(&mut map, "data", &args.data);
    fold_weight_model(&mut map, &args.model);
    if args.calibrate {
        map.set("calibrate", "true");
    }
    fold_restrictions(&mut map, &args.restriction);
    fold_msm(&mut map, &args.msm);
    fold(&mut map, "replicates", &args.replicates);
    fold(&mut map, "seed", &args.seed);
    fold_path(&mut map, "out", &args.out);
    fold_path(&mut map, "json_out", &args.json_out);
    fold_jobs(&mut map, jobs);
    default_key(&mut map, "out", "msm_estimate.csv");
    default_key(&mut map, "seed", config::DEFAULT_SEED);
    let mut known = vec![
        "data",
        "calibrate",
        "replicates",
        "seed",
        "out",
        "json_out",
        "jobs",
    ];
    known.extend_from_slice(WEIGHT_MODEL_KEYS);
    known.extend_from_slice(RESTRICTION_KEYS);
    known.extend_from_slice(MSM_KEYS);
    map.check_known(&known)?;
    apply_jobs(&map)?;

    let data = load_data(&map)?;
    let spec = msm_spec(&map)?;
    let replicates: usize = map.require_parsed("replicates")?;
    let seed: u64 = map.get_or("seed", config::DEFAULT_SEED)?;
    let calibrated = map.get("calibrate") == Some("true");

    let pipeline = |sample: &LongitudinalDataset| -> Result<MsmEstimate> {
        let mut sample = sample.clone();
        apply_configured_derivations(&mut sample, &map)?;
        let fitted = build_initial_weights(&sample, &map)?;
        let w = if calibrated {
            let rows = fitted.defined_rows();
            let system = build_restrictions(&sample, &rows, &map)?;
            let (w, solution) =
                calibrate::calibrate_weights(&sample, &fitted, &system, &SolveOptions::default())?;
            if solution.infeasible || !solution.converged {
                return Err(Error::numerical(format!(
                    "calibration failed on a resample (residual {:.3e} after {} iterations)",
                    solution.final_residual_inf, solution.iterations
                )));
            }
            w
        } else {
            fitted
        };
        msm::fit_msm(&sample, &spec, &w)
    };

    // Point estimate on the original data, then resampled standard errors.
    let estimate = pipeline(&data)?;
    let summary = msm::bootstrap(&data, replicates, seed, pipeline)?;
    let estimate = estimate.with_bootstrap(&summary)?;

    let out = path_setting(&map, "out")?;
    estimate.write_csv_path(&out)?;
    if let Some(path) = optional_path(&map, "json_out") {
        let combined = serde_json::json!({
            "estimate": estimate.to_json(),
            "bootstrap": summary.to_json(),
        });
        write_json(&path, &combined)?;
    }
    write_manifest(&out, "bootstrap", &map)?;
    print_estimate(&estimate);
    println!(
        "bootstrap: {} replicates used, {} failed",
        estimate.replicates_used, estimate.failed_replicates
    );
    eprintln!("wrote estimate to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnose

fn run_diagnose(mut map: ConfigMap, jobs: Option<usize>, args: DiagnoseArgs) -> Result<()> {
    fold_path(&mut map, "data", &args.data);
    fold_path(&mut map, "weights", &args.weights);
    fold(&mut map, "numerator", &args.numerator);
    fold(&mut map, "sigma_numerator", &args.sigma_numerator);
    fold_restrictions(&mut map, &args.restriction);
    fold_path(&mut map, "out", &args.out);
    fold_path(&mut map, "json_out", &args.json_out);
    fold_jobs(&mut map, jobs);
    default_key(&mut map, "out", "imbalance.csv");
    let mut known =
        vec!["data", "weights", "numerator", "sigma_numerator", "out", "json_out", "jobs"];
    known.extend_from_slice(RESTRICTION_KEYS);
    map.check_known(&known)?;
    apply_jobs(&map)?;

    let data = load_data(&map)?;
    let w = WeightMatrix::read_csv_path(&data, path_setting(&map, "weights")?)?;
    let rows = w.defined_rows();
    let system = build_restrictions(&data, &rows, &map)?;
    let report = calibrate::imbalance(&w, &system, None)?;

    let out = path_setting(&map, "out")?;
    report.write_csv_path(&out)?;
    if let Some(path) = optional_path(&map, "json_out") {
        write_json(&path, &report.to_json())?;
    }
    write_manifest(&out, "diagnose", &map)?;
    println!(
        "{} restrictions; max |scaled residual| = {:.6e}",
        system.r(),
        report.max_abs_residual()
    );
    eprintln!("wrote imbalance report to {}", out.display());
    Ok(())
}
