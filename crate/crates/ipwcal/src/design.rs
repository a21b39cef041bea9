//! Design-matrix construction from formulas.
//!
//! A [`DesignSpec`] pairs a formula with a response column; the response
//! determines which (subject, visit) rows enter the matrix:
//!
//! * response `r` (censoring): one row per subject–visit *at risk*, i.e.
//!   observed at the previous visit, so the matrix covers the retention
//!   model pr(R_j = 1 | R_{j−1} = 1, history);
//! * response `a1` (intensified treatment): rows observed at the visit with
//!   `a0 = 1`, matching the conditional submodel;
//! * any other response (`a0`, `a`, `y`, a covariate): rows observed at the
//!   visit.
//!
//! Lagged factors (`x@k`) read the subject's value `k` visits earlier, which
//! monotone dropout guarantees to be observed for every eligible row.

use ndarray::{Array1, Array2};

use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::formula::{Factor, Formula, Term};

/// A formula plus the response column it predicts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignSpec {
    pub formula: String,
    pub response: String,
}

impl DesignSpec {
    pub fn new(formula: impl Into<String>, response: impl Into<String>) -> Self {
        DesignSpec { formula: formula.into(), response: response.into() }
    }
}

/// A realized design: named columns over indexed (subject, visit) rows.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    /// Unique column names, in formula order.
    pub names: Vec<String>,
    /// One row per eligible (subject, visit), columns as in `names`.
    pub x: Array2<f64>,
    /// (subject index, visit) for each row.
    pub row_index: Vec<(usize, usize)>,
    /// Whether the formula contained the intercept term `1`.
    pub has_intercept: bool,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }
}

/// Is (subject, visit) an eligible row for the given response column?
pub fn row_eligible(
    data: &LongitudinalDataset,
    response: &str,
    subject: usize,
    visit: usize,
) -> bool {
    match response {
        "r" => visit >= 1 && data.observed(subject, visit - 1),
        "a1" => {
            data.observed(subject, visit)
                && data.value("a0", subject, visit).unwrap_or(f64::NAN) == 1.0
        }
        _ => data.observed(subject, visit),
    }
}

/// Build the design matrix for `spec` over visits `j_lo..=j_hi`.
pub fn build_design(
    data: &LongitudinalDataset,
    spec: &DesignSpec,
    visit_range: (usize, usize),
) -> Result<DesignMatrix> {
    let (j_lo, j_hi) = visit_range;
    if j_lo > j_hi || j_hi > data.t_max() {
        return Err(Error::validation(format!(
            "visit range {j_lo}..={j_hi} is invalid for a dataset with visits 0..={}",
            data.t_max()
        )));
    }
    let formula = Formula::parse(&spec.formula)?;
    if !data.has_column(&spec.response) {
        return Err(Error::validation(format!(
            "unknown response column '{}'",
            spec.response
        )));
    }
    for name in formula.referenced_columns() {
        if !data.has_column(name) {
            return Err(Error::validation(format!("unknown column '{name}'")));
        }
    }
    let max_lag = formula.max_lag() as usize;
    if max_lag > j_lo {
        return Err(Error::validation(format!(
            "lag {max_lag} is out of range at visit {j_lo}"
        )));
    }

    let rows: Vec<(usize, usize)> = (0..data.n())
        .flat_map(|i| (j_lo..=j_hi).map(move |j| (i, j)))
        .filter(|&(i, j)| row_eligible(data, &spec.response, i, j))
        .collect();
    if rows.is_empty() {
        return Err(Error::validation(format!(
            "empty design: no eligible rows for response '{}' in visits {j_lo}..={j_hi}",
            spec.response
        )));
    }

    let has_intercept = formula.has_intercept();
    // Expand terms into named columns; `visit` multiplies a term out into
    // one column per indicator level, dropping the first level as the
    // reference when an intercept is present.
    let mut names: Vec<String> = Vec::new();
    let mut evaluated: Vec<Vec<f64>> = Vec::new();
    for term in &formula.terms {
        if term.has_visit() {
            let first_level = j_lo + usize::from(has_intercept);
            for level in first_level..=j_hi {
                names.push(visit_term_name(term, level));
                evaluated.push(eval_term(data, term, &rows, Some(level))?);
            }
        } else {
            names.push(term.to_string());
            evaluated.push(eval_term(data, term, &rows, None)?);
        }
    }
    for (a, name) in names.iter().enumerate() {
        if names[..a].contains(name) {
            return Err(Error::validation(format!("duplicate design column '{name}'")));
        }
    }

    let mut x = Array2::<f64>::zeros((rows.len(), names.len()));
    for (c, col) in evaluated.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            x[(i, c)] = *v;
        }
    }
    Ok(DesignMatrix { names, x, row_index: rows, has_intercept })
}

fn visit_term_name(term: &Term, level: usize) -> String {
    let parts: Vec<String> = term
        .factors
        .iter()
        .map(|f| match f {
            Factor::Visit => format!("visit={level}"),
            other => other.to_string(),
        })
        .collect();
    parts.join(":")
}

fn eval_term(
    data: &LongitudinalDataset,
    term: &Term,
    rows: &[(usize, usize)],
    visit_level: Option<usize>,
) -> Result<Vec<f64>> {
    let mut out = vec![1.0; rows.len()];
    for factor in &term.factors {
        match factor {
            Factor::Intercept => {}
            Factor::Visit => {
                let level = visit_level.expect("visit term evaluated with a level");
                for (o, &(_, j)) in out.iter_mut().zip(rows) {
                    *o *= f64::from(j == level);
                }
            }
            Factor::Column { name, lag } => {
                let col = data.column(name)?;
                let visits = data.visits();
                let lag = *lag as usize;
                for (o, &(i, j)) in out.iter_mut().zip(rows) {
                    let v = col[i * visits + (j - lag)];
                    if v.is_nan() {
                        return Err(Error::validation(format!(
                            "missing value in column {name} at subject {}, visit {} \
                             (needed by the design at visit {j})",
                            data.id(i),
                            j - lag
                        )));
                    }
                    *o *= v;
                }
            }
        }
    }
    Ok(out)
}

/// The values of `spec.response` on the rows of a built design.
pub fn response_values(
    data: &LongitudinalDataset,
    spec: &DesignSpec,
    design: &DesignMatrix,
) -> Result<Array1<f64>> {
    let col = data.column(&spec.response)?;
    let visits = data.visits();
    let mut y = Array1::<f64>::zeros(design.nrows());
    for (k, &(i, j)) in design.row_index.iter().enumerate() {
        let v = col[i * visits + j];
        if v.is_nan() {
            return Err(Error::validation(format!(
                "missing response '{}' at subject {}, visit {j}",
                spec.response,
                data.id(i)
            )));
        }
        y[k] = v;
    }
    Ok(y)
}

/// A column shifted `depth` visits later within each subject: the value at
/// visit `j` is the source value at visit `j − depth`. Entries at visits
/// `j < depth` are undefined and returned as NaN; consuming such an entry
/// through [`build_design`] is an error.
pub fn lag(data: &LongitudinalDataset, column: &str, depth: usize) -> Result<Vec<f64>> {
    if depth == 0 {
        return Err(Error::validation("lag depth must be at least 1"));
    }
    let src = data.column(column)?;
    let visits = data.visits();
    let mut out = vec![f64::NAN; src.len()];
    for i in 0..data.n() {
        for j in depth..visits {
            out[i * visits + j] = src[i * visits + j - depth];
        }
    }
    Ok(out)
}
