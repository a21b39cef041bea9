//! End-to-end tests of the `ipwcal` binary: exit codes, byte-level
//! reproducibility, config-file precedence, manifest replay, and the full
//! weight → calibrate → diagnose → outcome-model pipeline on the bundled
//! toy cohort.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ipwcal"))
}

fn toy_cohort() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_cohort.csv")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn assert_status(output: &Output, expected: i32) {
    assert_eq!(
        output.status.code(),
        Some(expected),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("reading {name}: {e}"))
}

const NUMERATOR: &str = "1 + a0 @ 1 + a1 @ 1";
const DENOMINATOR: &str = "1 + a0 @ 1 + a1 @ 1 + x1 @ 1 + x2 @ 1 + x3 @ 1 + x4 @ 1";
const RETENTION: &str = "1 + visit + a0 @ 1 + a1 @ 1 + x1 @ 1 + x2 @ 1 + x3 @ 1 + x4 @ 1";
const DERIVE: &str = "a01diff = a0 - a1; cumdiff = cumsum(a01diff); cuma1 = cumsum(a1)";

fn fit_toy_weights(dir: &Path, out: &str) {
    let data = toy_cohort();
    let output = run_in(
        dir,
        &[
            "fit-weights",
            "--data",
            data.to_str().unwrap(),
            "--numerator",
            NUMERATOR,
            "--denominator",
            DENOMINATOR,
            "--censoring-model",
            RETENTION,
            "--out",
            out,
        ],
    );
    assert_status(&output, 0);
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let bad = run_in(dir.path(), &["fit-weights", "--no-such-flag"]);
    assert_status(&bad, 2);
    let unknown = run_in(dir.path(), &["frobnicate"]);
    assert_status(&unknown, 2);
    let help = run_in(dir.path(), &["--help"]);
    assert_status(&help, 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for command in ["simulate", "fit-weights", "calibrate", "fit-msm", "bootstrap", "diagnose"] {
        assert!(text.contains(command), "--help does not list {command}");
    }
}

#[test]
fn missing_input_is_a_data_error_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_in(
        dir.path(),
        &[
            "fit-weights",
            "--data",
            "no_such_file.csv",
            "--numerator",
            NUMERATOR,
            "--denominator",
            DENOMINATOR,
        ],
    );
    assert_status(&output, 3);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error[data]"), "stderr: {stderr}");
    assert!(stderr.contains("no_such_file.csv"), "stderr: {stderr}");
}

#[test]
fn missing_required_setting_is_reported_with_its_key() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_cohort();
    let output = run_in(
        dir.path(),
        &["fit-weights", "--data", data.to_str().unwrap(), "--numerator", NUMERATOR],
    );
    assert_status(&output, 3);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("denominator"), "stderr: {stderr}");
}

#[test]
fn numerical_failures_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    fit_toy_weights(dir.path(), "w.csv");
    // A duplicated regressor makes the outcome design rank deficient.
    let data = toy_cohort();
    let output = run_in(
        dir.path(),
        &[
            "fit-msm",
            "--data",
            data.to_str().unwrap(),
            "--weights",
            "w.csv",
            "--outcome",
            "1 + cumdiff + cumtwice",
            "--derive",
            "a01diff = a0 - a1; cumdiff = cumsum(a01diff); cumtwice = 2*cumdiff",
        ],
    );
    assert_status(&output, 4);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error[numerical]"), "stderr: {stderr}");
}

#[test]
fn identical_runs_produce_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    fit_toy_weights(a.path(), "w.csv");
    fit_toy_weights(b.path(), "w.csv");
    assert_eq!(read(a.path(), "w.csv"), read(b.path(), "w.csv"));
    assert_eq!(
        read(a.path(), "w.csv.manifest.json"),
        read(b.path(), "w.csv.manifest.json")
    );
}

#[test]
fn identity_calibration_returns_zero_multipliers_and_unchanged_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_cohort();
    // Identical numerator and denominator models cancel exactly, so every
    // weight is 1 and per-visit normalization already holds.
    let output = run_in(
        dir.path(),
        &[
            "fit-weights",
            "--data",
            data.to_str().unwrap(),
            "--numerator",
            NUMERATOR,
            "--denominator",
            NUMERATOR,
            "--out",
            "unit.csv",
        ],
    );
    assert_status(&output, 0);
    let output = run_in(
        dir.path(),
        &[
            "calibrate",
            "--data",
            data.to_str().unwrap(),
            "--weights",
            "unit.csv",
            "--restrictions",
            "normalization",
            "--out",
            "cal.csv",
            "--solution",
            "sol.json",
        ],
    );
    assert_status(&output, 0);

    let sol: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "sol.json")).unwrap();
    assert_eq!(sol["iterations"], 0, "already-satisfied system needs no steps");
    for entry in sol["lambda"].as_array().unwrap() {
        assert_eq!(entry["value"].as_f64().unwrap(), 0.0);
    }

    let parse_weights = |name: &str| -> Vec<(String, String, String)> {
        let text = String::from_utf8(read(dir.path(), name)).unwrap();
        text.lines()
            .skip(1)
            .map(|line| {
                let mut it = line.split(',');
                (
                    it.next().unwrap().to_string(),
                    it.next().unwrap().to_string(),
                    it.next().unwrap().to_string(),
                )
            })
            .collect()
    };
    // (id, visit, weight) triples are byte-identical between input and
    // output; only the kind column may differ.
    assert_eq!(parse_weights("unit.csv"), parse_weights("cal.csv"));
}

#[test]
fn toy_pipeline_meets_the_restriction_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_cohort();
    fit_toy_weights(dir.path(), "w0.csv");
    let calibrate_args = [
        "--restrictions",
        "treatment,censoring",
        "--numerator",
        NUMERATOR,
        "--probe",
        DENOMINATOR,
        "--censoring-probe",
        RETENTION,
    ];
    let mut args = vec![
        "calibrate",
        "--data",
        data.to_str().unwrap(),
        "--weights",
        "w0.csv",
        "--out",
        "wcal.csv",
        "--solution",
        "sol.json",
        "--diagnostics",
        "diag.csv",
    ];
    args.extend_from_slice(&calibrate_args);
    let output = run_in(dir.path(), &args);
    assert_status(&output, 0);

    // Raw residuals: ‖Kᵀw⋆ − l‖∞ ≤ 1e-8 · max(1, ‖l‖∞).
    let text = String::from_utf8(read(dir.path(), "diag.csv")).unwrap();
    let mut max_residual = 0.0f64;
    let mut max_target = 0.0f64;
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        max_target = max_target.max(fields[1].parse::<f64>().unwrap().abs());
        max_residual = max_residual.max(fields[3].parse::<f64>().unwrap().abs());
    }
    assert!(
        max_residual <= 1e-8 * max_target.max(1.0),
        "raw residual {max_residual:e} exceeds 1e-8 * {max_target}"
    );

    // Per-row scaled residuals from diagnose stay at solver precision.
    let mut args = vec![
        "diagnose",
        "--data",
        data.to_str().unwrap(),
        "--weights",
        "wcal.csv",
        "--out",
        "imb.csv",
        "--json-out",
        "imb.json",
    ];
    args.extend_from_slice(&calibrate_args);
    let output = run_in(dir.path(), &args);
    assert_status(&output, 0);
    let imb: serde_json::Value = serde_json::from_slice(&read(dir.path(), "imb.json")).unwrap();
    let max_scaled = imb["max_abs_residual"].as_f64().unwrap();
    assert!(max_scaled <= 1e-8, "scaled residual {max_scaled:e}");

    // The calibrated weights drive the outcome model without error.
    let output = run_in(
        dir.path(),
        &[
            "fit-msm",
            "--data",
            data.to_str().unwrap(),
            "--weights",
            "wcal.csv",
            "--outcome",
            "1 + cumdiff + cuma1",
            "--derive",
            DERIVE,
            "--treatment-terms",
            "cumdiff,cuma1",
            "--out",
            "est.csv",
        ],
    );
    assert_status(&output, 0);
    let est = String::from_utf8(read(dir.path(), "est.csv")).unwrap();
    assert_eq!(est.lines().count(), 4, "intercept + two exposures:\n{est}");
}

#[test]
fn study_summary_is_independent_of_jobs() {
    let base = [
        "simulate",
        "--n",
        "60",
        "--scenario",
        "1",
        "--visits",
        "4",
        "--seed",
        "19",
        "--replicates",
        "3",
        "--out",
        "summary.csv",
    ];
    let a = tempfile::tempdir().unwrap();
    let mut args_a: Vec<&str> = base.to_vec();
    args_a.extend_from_slice(&["--jobs", "1"]);
    assert_status(&run_in(a.path(), &args_a), 0);
    let b = tempfile::tempdir().unwrap();
    let mut args_b: Vec<&str> = base.to_vec();
    args_b.extend_from_slice(&["--jobs", "4"]);
    assert_status(&run_in(b.path(), &args_b), 0);
    assert_eq!(read(a.path(), "summary.csv"), read(b.path(), "summary.csv"));
}

#[test]
fn bootstrap_is_independent_of_jobs() {
    let data = toy_cohort();
    let data = data.to_str().unwrap();
    let base = [
        "bootstrap",
        "--data",
        data,
        "--numerator",
        NUMERATOR,
        "--denominator",
        DENOMINATOR,
        "--censoring-model",
        RETENTION,
        "--outcome",
        "1 + cumdiff + cuma1",
        "--derive",
        DERIVE,
        "--treatment-terms",
        "cumdiff,cuma1",
        "--replicates",
        "12",
        "--seed",
        "5",
        "--out",
        "boot.csv",
    ];
    let a = tempfile::tempdir().unwrap();
    let mut args_a: Vec<&str> = base.to_vec();
    args_a.extend_from_slice(&["--jobs", "1"]);
    assert_status(&run_in(a.path(), &args_a), 0);
    let b = tempfile::tempdir().unwrap();
    let mut args_b: Vec<&str> = base.to_vec();
    args_b.extend_from_slice(&["--jobs", "4"]);
    assert_status(&run_in(b.path(), &args_b), 0);
    assert_eq!(read(a.path(), "boot.csv"), read(b.path(), "boot.csv"));
}

#[test]
fn manifest_settings_alone_replay_the_run() {
    let first = tempfile::tempdir().unwrap();
    fit_toy_weights(first.path(), "w.csv");
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(first.path(), "w.csv.manifest.json")).unwrap();
    assert_eq!(manifest["command"], "fit-weights");

    // Turn the recorded settings back into a config file and rerun with
    // nothing else.
    let mut config = String::new();
    for (key, value) in manifest["settings"].as_object().unwrap() {
        config.push_str(&format!("{key} = {}\n", value.as_str().unwrap()));
    }
    let second = tempfile::tempdir().unwrap();
    std::fs::write(second.path().join("replay.conf"), &config).unwrap();
    let output = run_in(second.path(), &["fit-weights", "--config", "replay.conf"]);
    assert_status(&output, 0);
    assert_eq!(read(first.path(), "w.csv"), read(second.path(), "w.csv"));
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_cohort();
    let config = format!(
        "data = {}\nnumerator = {NUMERATOR}\ndenominator = {NUMERATOR}\nout = from_config.csv\n",
        data.display()
    );
    std::fs::write(dir.path().join("run.conf"), config).unwrap();
    let output = run_in(
        dir.path(),
        &[
            "fit-weights",
            "--config",
            "run.conf",
            "--denominator",
            DENOMINATOR,
            "--out",
            "from_flag.csv",
        ],
    );
    assert_status(&output, 0);
    assert!(dir.path().join("from_flag.csv").exists());
    assert!(!dir.path().join("from_config.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "from_flag.csv.manifest.json")).unwrap();
    assert_eq!(manifest["settings"]["denominator"], DENOMINATOR);
    assert_eq!(manifest["settings"]["out"], "from_flag.csv");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "replciates = 3\n").unwrap();
    let output = run_in(
        dir.path(),
        &["simulate", "--config", "bad.conf", "--n", "50", "--scenario", "1", "--replicates", "2"],
    );
    assert_status(&output, 3);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("replciates"), "stderr: {stderr}");
}
