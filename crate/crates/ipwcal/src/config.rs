//! Plain key–value configuration files.
//!
//! Format: one `key = value` pair per line; blank lines and lines whose
//! first non-space character is `#` are ignored; values may contain `=`
//! (only the first splits); a key may appear at most once. Keys are
//! case-sensitive.
//!
//! The study commands read these keys (command-line flags override them):
//!
//! | key          | meaning                                     | default     |
//! |--------------|---------------------------------------------|-------------|
//! | `n`          | subjects per cohort                         | required    |
//! | `scenario`   | censoring: `none`/`1` or `covariate_dependent`/`2` | required |
//! | `covariates` | `correct` or `transformed`                  | `correct`   |
//! | `visits`     | follow-up visits after baseline             | `10`        |
//! | `seed`       | RNG seed (64-bit)                           | `42`        |
//! | `replicates` | cohorts in a study / bootstrap resamples    | required    |
//! | `outcome_sd` | outcome noise standard deviation            | `20`        |
//! | `estimators` | comma list of `mle`, `cmle`                 | `mle,cmle`  |
//!
//! Pipeline commands read model formulas and paths through the same
//! mechanism; their keys are documented in the command-line help.
//!
//! Derived-column recipes use a small expression syntax (see
//! [`parse_derivations`]): semicolon-separated `name = cumsum(col)` or
//! `name = 2*a0 - a1` linear combinations.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::Derivation;
use crate::error::{Error, Result};
use crate::simulate::{
    CensoringScenario, CovariateSet, Estimator, ScenarioConfig, DEFAULT_OUTCOME_SD,
};

/// Default seed when neither a config key nor a flag supplies one.
pub const DEFAULT_SEED: u64 = 42;
/// Default follow-up length.
pub const DEFAULT_VISITS: usize = 10;

/// An ordered key–value store merging a config file with command-line
/// overrides.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> ConfigMap {
        ConfigMap::default()
    }

    /// Parse the `key = value` format. Duplicate keys are an error: a
    /// config file with two values for one setting has no well-defined
    /// meaning, and silently taking either would mask the mistake.
    pub fn parse_str(text: &str) -> Result<ConfigMap> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(format!(
                    "config line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::parse(format!("config line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::parse(format!(
                    "config line {}: key '{key}' appears more than once",
                    lineno + 1
                )));
            }
        }
        Ok(ConfigMap { entries })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<ConfigMap> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        ConfigMap::parse_str(&text)
    }

    /// Set (or override) one key — how command-line flags take precedence
    /// over file values.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| {
            Error::validation(format!("missing required setting '{key}' (config key or flag)"))
        })
    }

    /// Parse `key`'s value if present; a present-but-malformed value is an
    /// error naming the key.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::validation(format!("setting '{key}': cannot parse '{raw}'"))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get_parsed(key)?.unwrap_or(default))
    }

    pub fn require_parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        self.require(key)?;
        Ok(self.get_parsed(key)?.expect("key present"))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Reject keys outside `known` — catches misspelled settings that
    /// would otherwise be silently ignored.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for key in self.keys() {
            if !known.contains(&key) {
                return Err(Error::validation(format!(
                    "unknown setting '{key}' (known settings: {})",
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// The merged settings as JSON, for run manifests.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.entries
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }
}

/// Settings a study command understands.
pub const STUDY_KEYS: &[&str] =
    &["n", "scenario", "covariates", "visits", "seed", "replicates", "outcome_sd", "estimators"];

/// Build a [`ScenarioConfig`] from merged settings; `n`, `scenario`, and
/// `replicates` are required, everything else defaults as documented in
/// the module header. The result is validated.
pub fn scenario_from_config(config: &ConfigMap) -> Result<ScenarioConfig> {
    let scenario = ScenarioConfig {
        n: config.require_parsed("n")?,
        t: config.get_or("visits", DEFAULT_VISITS)?,
        censoring: CensoringScenario::parse(config.require("scenario")?)?,
        covariates: match config.get("covariates") {
            Some(raw) => CovariateSet::parse(raw)?,
            None => CovariateSet::Correct,
        },
        seed: config.get_or("seed", DEFAULT_SEED)?,
        replicates: config.require_parsed("replicates")?,
        outcome_sd: config.get_or("outcome_sd", DEFAULT_OUTCOME_SD)?,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Parse the `estimators` setting: a comma-separated subset of
/// `mle`, `cmle` (default: both, calibrated last).
pub fn estimators_from_config(config: &ConfigMap) -> Result<Vec<Estimator>> {
    match config.get("estimators") {
        None => Ok(vec![Estimator::Mle, Estimator::Cmle]),
        Some(raw) => {
            let list: Vec<Estimator> = raw
                .split(',')
                .map(|s| Estimator::parse(s.trim()))
                .collect::<Result<_>>()?;
            if list.is_empty() {
                return Err(Error::validation("setting 'estimators': empty list"));
            }
            Ok(list)
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parse derived-column recipes.
///
/// Syntax: recipes separated by `;`. Each recipe is `name = rhs` where
/// `rhs` is either `cumsum(column)` — the running within-subject sum of
/// `column` from the first visit — or a linear combination of columns
/// like `a0 - a1`, `2*a0 + 0.5*x1`, `-a1`. Coefficients default to ±1;
/// `*` binds a numeric coefficient to the column after it.
pub fn parse_derivations(text: &str) -> Result<Vec<Derivation>> {
    let mut out = Vec::new();
    for raw in text.split(';') {
        let recipe = raw.trim();
        if recipe.is_empty() {
            continue;
        }
        let Some((name, rhs)) = recipe.split_once('=') else {
            return Err(Error::parse(format!(
                "derivation '{recipe}': expected 'name = expression'"
            )));
        };
        let name = name.trim();
        if !is_identifier(name) {
            return Err(Error::parse(format!(
                "derivation '{recipe}': '{name}' is not a valid column name"
            )));
        }
        let rhs = rhs.trim();
        if let Some(inner) = rhs.strip_prefix("cumsum") {
            let inner = inner.trim();
            let source = inner
                .strip_prefix('(')
                .and_then(|s| s.strip_suffix(')'))
                .map(str::trim)
                .ok_or_else(|| {
                    Error::parse(format!("derivation '{recipe}': expected cumsum(column)"))
                })?;
            if !is_identifier(source) {
                return Err(Error::parse(format!(
                    "derivation '{recipe}': '{source}' is not a valid column name"
                )));
            }
            out.push(Derivation::Cumsum { name: name.to_string(), source: source.to_string() });
        } else {
            out.push(Derivation::Combination {
                name: name.to_string(),
                terms: parse_linear_terms(rhs, recipe)?,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::parse("no derivations found (expected 'name = expression; ...')"));
    }
    Ok(out)
}

fn parse_linear_terms(expr: &str, context: &str) -> Result<Vec<(f64, String)>> {
    // Split on +/- signs that separate terms, keeping each sign.
    let mut terms = Vec::new();
    let mut current = String::new();
    let mut sign = 1.0f64;
    let mut pending_sign = 1.0f64;
    let mut seen_any = false;
    let flush = |buf: &mut String, sign: f64, terms: &mut Vec<(f64, String)>| -> Result<()> {
        let term = buf.trim();
        if term.is_empty() {
            return Err(Error::parse(format!("derivation '{context}': empty term")));
        }
        let (coef, column) = match term.split_once('*') {
            Some((num, col)) => {
                let coef: f64 = num.trim().parse().map_err(|_| {
                    Error::parse(format!(
                        "derivation '{context}': '{}' is not a numeric coefficient",
                        num.trim()
                    ))
                })?;
                (coef, col.trim())
            }
            None => (1.0, term),
        };
        if !is_identifier(column) {
            return Err(Error::parse(format!(
                "derivation '{context}': '{column}' is not a valid column name"
            )));
        }
        terms.push((sign * coef, column.to_string()));
        buf.clear();
        Ok(())
    };
    for c in expr.chars() {
        match c {
            '+' | '-' if current.trim().is_empty() && !seen_any => {
                // Leading sign of the first term.
                pending_sign = if c == '-' { -pending_sign } else { pending_sign };
            }
            '+' | '-' => {
                flush(&mut current, sign * pending_sign, &mut terms)?;
                sign = if c == '-' { -1.0 } else { 1.0 };
                pending_sign = 1.0;
                seen_any = true;
            }
            _ => {
                if !c.is_whitespace() || !current.is_empty() {
                    current.push(c);
                }
                if !current.trim().is_empty() {
                    seen_any = true;
                }
            }
        }
    }
    flush(&mut current, sign * pending_sign, &mut terms)?;
    Ok(terms)
}
