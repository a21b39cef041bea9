//! Longitudinal cohort data model and long-format CSV ingestion.
//!
//! A dataset holds one record per (subject, visit) for visits `0..=T`, with
//! visit 0 the baseline. Each record carries the treatment (two ordinal
//! indicators `a0`/`a1`, a single binary indicator, or a continuous value),
//! named covariates, the outcome `y`, and the observation indicator `r`.
//! Dropout is monotone: once `r = 0` the subject never returns, and fields
//! may be missing only on unobserved records.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write as IoWrite};
use std::path::Path;

use crate::error::{Error, Result};

/// How treatment is coded in the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreatmentKind {
    /// Three ordered levels coded by indicators `a0` (any treatment) and
    /// `a1` (intensified treatment, only when `a0 = 1`).
    Ordinal3,
    /// A single 0/1 indicator `a0`.
    Binary,
    /// A real-valued treatment `a`.
    Continuous,
}

impl fmt::Display for TreatmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TreatmentKind::Ordinal3 => "ordinal3",
            TreatmentKind::Binary => "binary",
            TreatmentKind::Continuous => "continuous",
        };
        write!(f, "{s}")
    }
}

/// Which file columns play which roles.
#[derive(Debug, Clone)]
pub struct Schema {
    pub id: String,
    pub visit: String,
    pub r: String,
    pub y: String,
    pub treatment: TreatmentColumns,
    /// Covariate columns; `None` means every remaining column.
    pub covariates: Option<Vec<String>>,
}

/// Treatment column names per coding.
#[derive(Debug, Clone)]
pub enum TreatmentColumns {
    Ordinal { a0: String, a1: String },
    Binary { a0: String },
    Continuous { a: String },
}

impl Schema {
    /// Standard column names for a given treatment coding.
    pub fn standard(kind: TreatmentKind) -> Schema {
        let treatment = match kind {
            TreatmentKind::Ordinal3 => TreatmentColumns::Ordinal { a0: "a0".into(), a1: "a1".into() },
            TreatmentKind::Binary => TreatmentColumns::Binary { a0: "a0".into() },
            TreatmentKind::Continuous => TreatmentColumns::Continuous { a: "a".into() },
        };
        Schema {
            id: "id".into(),
            visit: "visit".into(),
            r: "r".into(),
            y: "y".into(),
            treatment,
            covariates: None,
        }
    }

    /// Infer the treatment coding from a header with standard names:
    /// `a0` and `a1` → ordinal, `a0` alone → binary, `a` → continuous.
    pub fn infer(header: &[String]) -> Result<Schema> {
        let has = |name: &str| header.iter().any(|h| h == name);
        for required in ["id", "visit", "r", "y"] {
            if !has(required) {
                return Err(Error::validation(format!(
                    "column '{required}' not found in header"
                )));
            }
        }
        let kind = match (has("a0"), has("a1"), has("a")) {
            (true, true, false) => TreatmentKind::Ordinal3,
            (true, false, false) => TreatmentKind::Binary,
            (false, false, true) => TreatmentKind::Continuous,
            (false, false, false) => {
                return Err(Error::validation(
                    "no treatment column found: expected 'a0' (+ optional 'a1') or 'a'",
                ))
            }
            _ => {
                return Err(Error::validation(
                    "ambiguous treatment columns: use either 'a0'/'a1' or 'a', not both",
                ))
            }
        };
        Ok(Schema::standard(kind))
    }

    fn kind(&self) -> TreatmentKind {
        match self.treatment {
            TreatmentColumns::Ordinal { .. } => TreatmentKind::Ordinal3,
            TreatmentColumns::Binary { .. } => TreatmentKind::Binary,
            TreatmentColumns::Continuous { .. } => TreatmentKind::Continuous,
        }
    }

    fn role_columns(&self) -> Vec<&str> {
        let mut v = vec![self.id.as_str(), self.visit.as_str(), self.r.as_str(), self.y.as_str()];
        match &self.treatment {
            TreatmentColumns::Ordinal { a0, a1 } => {
                v.push(a0);
                v.push(a1);
            }
            TreatmentColumns::Binary { a0 } => v.push(a0),
            TreatmentColumns::Continuous { a } => v.push(a),
        }
        v
    }
}

/// Column names that cannot be used for covariates: they either have a fixed
/// role or are reserved words of the formula grammar.
const RESERVED: &[&str] = &["id", "visit", "r", "y", "a0", "a1", "a", "1"];

/// A recipe for a derived column, applied before model fitting (e.g. the
/// cumulative exposure regressors of an outcome model).
#[derive(Debug, Clone, PartialEq)]
pub enum Derivation {
    /// Within-subject running sum of `source` over visits `0..=j`.
    Cumsum { name: String, source: String },
    /// Pointwise linear combination `Σ coefficient·column`.
    Combination { name: String, terms: Vec<(f64, String)> },
}

impl Derivation {
    /// The name of the column the recipe creates.
    pub fn name(&self) -> &str {
        match self {
            Derivation::Cumsum { name, .. } => name,
            Derivation::Combination { name, .. } => name,
        }
    }
}

/// A validated longitudinal cohort.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    ids: Vec<String>,
    visits: usize, // T + 1
    kind: TreatmentKind,
    /// Flat storage: `columns[c][i * visits + j]`; missing values are NaN.
    columns: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
    covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    /// Number of subjects.
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Last visit index T (visits run 0..=T).
    pub fn t_max(&self) -> usize {
        self.visits - 1
    }

    /// Number of visit indices, T + 1.
    pub fn visits(&self) -> usize {
        self.visits
    }

    pub fn treatment_kind(&self) -> TreatmentKind {
        self.kind
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, subject: usize) -> &str {
        &self.ids[subject]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// All column names in storage order.
    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Raw column storage (length n·(T+1), NaN = missing).
    pub fn column(&self, name: &str) -> Result<&[f64]> {
        match self.index.get(name) {
            Some(&c) => Ok(&self.columns[c].1),
            None => Err(Error::validation(format!("unknown column '{name}'"))),
        }
    }

    /// Value of `column` for `subject` at `visit`.
    pub fn value(&self, name: &str, subject: usize, visit: usize) -> Result<f64> {
        Ok(self.column(name)?[subject * self.visits + visit])
    }

    /// Observation indicator at (subject, visit).
    pub fn observed(&self, subject: usize, visit: usize) -> bool {
        self.column("r").expect("r column always present")[subject * self.visits + visit] == 1.0
    }

    /// First visit with r = 0, or T + 1 when the subject is never censored.
    pub fn first_censored_visit(&self, subject: usize) -> usize {
        let r = self.column("r").expect("r column always present");
        for j in 0..self.visits {
            if r[subject * self.visits + j] == 0.0 {
                return j;
            }
        }
        self.visits
    }

    /// Number of subjects observed (r = 1) at `visit`.
    pub fn observed_count(&self, visit: usize) -> usize {
        (0..self.n()).filter(|&i| self.observed(i, visit)).count()
    }

    /// Append a derived column. Values must be present (non-NaN) wherever
    /// r = 1; the name must be a fresh valid identifier.
    pub fn add_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        validate_column_name(name)?;
        if self.index.contains_key(name) {
            return Err(Error::validation(format!("column '{name}' already exists")));
        }
        if values.len() != self.n() * self.visits {
            return Err(Error::validation(format!(
                "column '{name}' has {} values, expected {}",
                values.len(),
                self.n() * self.visits
            )));
        }
        for i in 0..self.n() {
            for j in 0..self.visits {
                if self.observed(i, j) && values[i * self.visits + j].is_nan() {
                    return Err(Error::validation(format!(
                        "missing value in column {name} at subject {}, visit {j} (observed record)",
                        self.ids[i]
                    )));
                }
            }
        }
        self.index.insert(name.to_string(), self.columns.len());
        self.columns.push((name.to_string(), values));
        Ok(())
    }

    /// Append the within-subject running sum of `source` over visits 0..=j.
    pub fn add_cumsum(&mut self, name: &str, source: &str) -> Result<()> {
        let src = self.column(source)?.to_vec();
        let mut out = vec![f64::NAN; src.len()];
        for i in 0..self.n() {
            let mut acc = 0.0;
            for j in 0..self.visits {
                let v = src[i * self.visits + j];
                if v.is_nan() {
                    break; // censored tail stays missing
                }
                acc += v;
                out[i * self.visits + j] = acc;
            }
        }
        self.add_column(name, out)
    }

    /// Append a linear combination Σ coefficient·column of existing columns.
    pub fn add_combination(&mut self, name: &str, terms: &[(f64, &str)]) -> Result<()> {
        let mut out = vec![0.0; self.n() * self.visits];
        for &(coef, col) in terms {
            let src = self.column(col)?;
            for (o, v) in out.iter_mut().zip(src.iter()) {
                *o += coef * v;
            }
        }
        self.add_column(name, out)
    }

    /// Apply derivation recipes in order, skipping any whose target column
    /// already exists (so preparation is idempotent).
    pub fn apply_derivations(&mut self, recipes: &[Derivation]) -> Result<()> {
        for recipe in recipes {
            if self.has_column(recipe.name()) {
                continue;
            }
            match recipe {
                Derivation::Cumsum { name, source } => self.add_cumsum(name, source)?,
                Derivation::Combination { name, terms } => {
                    let borrowed: Vec<(f64, &str)> =
                        terms.iter().map(|(c, s)| (*c, s.as_str())).collect();
                    self.add_combination(name, &borrowed)?;
                }
            }
        }
        Ok(())
    }

    /// New dataset containing the given subjects (duplicates allowed, as in
    /// bootstrap resampling). Subjects are renumbered 0, 1, … in draw order.
    pub fn resample(&self, subjects: &[usize]) -> LongitudinalDataset {
        let v = self.visits;
        let columns: Vec<(String, Vec<f64>)> = self
            .columns
            .iter()
            .map(|(name, data)| {
                let mut out = Vec::with_capacity(subjects.len() * v);
                for &i in subjects {
                    out.extend_from_slice(&data[i * v..(i + 1) * v]);
                }
                (name.clone(), out)
            })
            .collect();
        LongitudinalDataset {
            ids: (0..subjects.len()).map(|k| k.to_string()).collect(),
            visits: v,
            kind: self.kind,
            index: self.index.clone(),
            covariate_names: self.covariate_names.clone(),
            columns,
        }
    }

    /// Write the canonical long-format CSV: subjects in storage order, visits
    /// ascending, columns `id,visit,r,y,<treatment>,<covariates>`. Missing
    /// values become empty fields; floats use the shortest representation
    /// that round-trips.
    pub fn write_long<W: IoWrite>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "visit".to_string()];
        header.extend(self.columns.iter().map(|(n, _)| n.clone()));
        w.write_record(&header).map_err(csv_write_err)?;
        let integer_cols: Vec<bool> = self
            .columns
            .iter()
            .map(|(n, _)| matches!(n.as_str(), "r" | "a0" | "a1"))
            .collect();
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            for j in 0..self.visits {
                record.clear();
                record.push(self.ids[i].clone());
                record.push(j.to_string());
                for (c, (_, data)) in self.columns.iter().enumerate() {
                    let v = data[i * self.visits + j];
                    record.push(if v.is_nan() {
                        String::new()
                    } else if integer_cols[c] {
                        format!("{}", v as i64)
                    } else {
                        format!("{v}")
                    });
                }
                w.write_record(&record).map_err(csv_write_err)?;
            }
        }
        w.flush().map_err(|e| Error::io("<writer>", e))?;
        Ok(())
    }

    /// `write_long` to a file path.
    pub fn write_long_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_long(std::io::BufWriter::new(f))
    }
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::parse(format!("csv write failed: {e}"))
}

fn validate_column_name(name: &str) -> Result<()> {
    let mut chars = name.chars();
    let head_ok = chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_');
    let tail_ok = chars.all(|c| c.is_ascii_alphanumeric() || c == '_');
    if !head_ok || !tail_ok {
        return Err(Error::validation(format!(
            "column name '{name}' is not a valid identifier"
        )));
    }
    if RESERVED.contains(&name) {
        return Err(Error::validation(format!("column name '{name}' is reserved")));
    }
    Ok(())
}

/// Load a long-format CSV file. See the module docs for the format.
pub fn load_long(path: impl AsRef<Path>, schema: &Schema) -> Result<LongitudinalDataset> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_long_reader(std::io::BufReader::new(f), schema)
}

/// Load a long-format CSV file, inferring the schema from its header.
pub fn load_long_auto(path: impl AsRef<Path>) -> Result<LongitudinalDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(format!("line 1: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let schema = Schema::infer(&header)?;
    load_long_reader(bytes.as_slice(), &schema)
}

/// Load a long-format CSV from any reader.
pub fn load_long_reader<R: Read>(reader: R, schema: &Schema) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(format!("line 1: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    // Resolve role columns in the header.
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::validation(format!("column '{name}' not found in header")))
    };
    let id_col = find(&schema.id)?;
    let visit_col = find(&schema.visit)?;
    let r_col = find(&schema.r)?;
    let y_col = find(&schema.y)?;
    let treatment_cols: Vec<(usize, &'static str)> = match &schema.treatment {
        TreatmentColumns::Ordinal { a0, a1 } => vec![(find(a0)?, "a0"), (find(a1)?, "a1")],
        TreatmentColumns::Binary { a0 } => vec![(find(a0)?, "a0")],
        TreatmentColumns::Continuous { a } => vec![(find(a)?, "a")],
    };

    // Covariates: either the listed columns or everything without a role.
    let covariate_cols: Vec<(usize, String)> = match &schema.covariates {
        Some(names) => {
            let mut v = Vec::with_capacity(names.len());
            for name in names {
                v.push((find(name)?, name.clone()));
            }
            v
        }
        None => {
            let roles = schema.role_columns();
            header
                .iter()
                .enumerate()
                .filter(|(_, h)| !roles.contains(&h.as_str()))
                .map(|(c, h)| (c, h.clone()))
                .collect()
        }
    };
    for (_, name) in &covariate_cols {
        validate_column_name(name)
            .map_err(|e| Error::validation(format!("covariate {e}")))?;
    }
    {
        let mut seen: Vec<&str> = Vec::new();
        for (_, name) in &covariate_cols {
            if seen.contains(&name.as_str()) {
                return Err(Error::validation(format!("duplicate column '{name}' in header")));
            }
            seen.push(name);
        }
    }

    // Parse rows into a sparse (subject, visit) table.
    struct RawRow {
        visit: usize,
        r: f64,
        y: f64,
        treatment: Vec<f64>,
        covariates: Vec<f64>,
    }
    let mut subject_order: Vec<String> = Vec::new();
    let mut by_subject: HashMap<String, Vec<RawRow>> = HashMap::new();
    let mut max_visit = 0usize;

    for (rec_idx, rec) in rdr.records().enumerate() {
        let line = rec_idx + 2; // header is line 1
        let rec = rec.map_err(|e| Error::parse(format!("line {line}: {e}")))?;
        let raw_field = |c: usize| rec.get(c).unwrap_or("").trim();
        let num_field = |c: usize| -> Result<f64> {
            let s = raw_field(c);
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse::<f64>().map_err(|_| {
                Error::parse(format!(
                    "line {line}: column '{}': invalid number '{s}'",
                    header[c]
                ))
            })
        };
        let id = raw_field(id_col).to_string();
        if id.is_empty() {
            return Err(Error::parse(format!("line {line}: empty subject id")));
        }
        let visit: usize = raw_field(visit_col).parse().map_err(|_| {
            Error::parse(format!(
                "line {line}: column '{}': invalid visit index '{}'",
                header[visit_col],
                raw_field(visit_col)
            ))
        })?;
        if visit > 10_000 {
            return Err(Error::parse(format!(
                "line {line}: visit index {visit} is implausibly large"
            )));
        }
        let r = num_field(r_col)?;
        if r.is_nan() || (r != 0.0 && r != 1.0) {
            return Err(Error::validation(format!(
                "observation indicator must be 0 or 1 at subject {id}, visit {visit}"
            )));
        }
        let row = RawRow {
            visit,
            r,
            y: num_field(y_col)?,
            treatment: treatment_cols
                .iter()
                .map(|&(c, _)| num_field(c))
                .collect::<Result<_>>()?,
            covariates: covariate_cols
                .iter()
                .map(|&(c, _)| num_field(c))
                .collect::<Result<_>>()?,
        };
        max_visit = max_visit.max(visit);
        if !by_subject.contains_key(&id) {
            subject_order.push(id.clone());
        }
        by_subject.entry(id).or_default().push(row);
    }
    if subject_order.is_empty() {
        return Err(Error::validation("dataset contains no records"));
    }

    // Assemble the dense table and validate the invariants.
    let visits = max_visit + 1;
    let n = subject_order.len();
    let kind = schema.kind();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    columns.push(("r".into(), vec![f64::NAN; n * visits]));
    columns.push(("y".into(), vec![f64::NAN; n * visits]));
    for &(_, canonical) in &treatment_cols {
        columns.push((canonical.into(), vec![f64::NAN; n * visits]));
    }
    for (_, name) in &covariate_cols {
        columns.push((name.clone(), vec![f64::NAN; n * visits]));
    }
    let mut seen = vec![false; n * visits];
    for (i, id) in subject_order.iter().enumerate() {
        for row in by_subject.remove(id).expect("subject present") {
            let cell = i * visits + row.visit;
            if seen[cell] {
                return Err(Error::validation(format!(
                    "duplicate record for subject {id}, visit {}",
                    row.visit
                )));
            }
            seen[cell] = true;
            columns[0].1[cell] = row.r;
            columns[1].1[cell] = row.y;
            for (k, v) in row.treatment.iter().enumerate() {
                columns[2 + k].1[cell] = *v;
            }
            for (k, v) in row.covariates.iter().enumerate() {
                columns[2 + treatment_cols.len() + k].1[cell] = *v;
            }
        }
        for j in 0..visits {
            if !seen[i * visits + j] {
                return Err(Error::validation(format!("subject {id}: missing visit {j}")));
            }
        }
    }

    let index: HashMap<String, usize> = columns
        .iter()
        .enumerate()
        .map(|(c, (name, _))| (name.clone(), c))
        .collect();
    let data = LongitudinalDataset {
        ids: subject_order,
        visits,
        kind,
        covariate_names: covariate_cols.into_iter().map(|(_, n)| n).collect(),
        columns,
        index,
    };
    validate_invariants(&data)?;
    Ok(data)
}

fn validate_invariants(data: &LongitudinalDataset) -> Result<()> {
    let visits = data.visits;
    let r = data.column("r")?;
    for i in 0..data.n() {
        let id = data.id(i);
        if r[i * visits] != 1.0 {
            return Err(Error::validation(format!(
                "observation indicator must be 1 at visit 0 for subject {id}"
            )));
        }
        let mut dropped = false;
        for j in 0..visits {
            let rij = r[i * visits + j];
            if dropped && rij == 1.0 {
                return Err(Error::validation(format!(
                    "non-monotone dropout at subject {id}, visit {j}"
                )));
            }
            if rij == 0.0 {
                dropped = true;
            }
        }
    }
    // Indicator coding and completeness on observed records.
    for indicator in ["a0", "a1"] {
        if let Ok(col) = data.column(indicator) {
            for i in 0..data.n() {
                for j in 0..visits {
                    let v = col[i * visits + j];
                    if r[i * visits + j] == 1.0 && !(v == 0.0 || v == 1.0) {
                        return Err(Error::validation(format!(
                            "treatment indicator {indicator} must be 0 or 1 at subject {}, visit {j}",
                            data.id(i)
                        )));
                    }
                }
            }
        }
    }
    if data.kind == TreatmentKind::Ordinal3 {
        let a0 = data.column("a0")?;
        let a1 = data.column("a1")?;
        for i in 0..data.n() {
            for j in 0..visits {
                if r[i * visits + j] == 1.0
                    && a1[i * visits + j] == 1.0
                    && a0[i * visits + j] == 0.0
                {
                    return Err(Error::validation(format!(
                        "ordinal coding violated at subject {}, visit {j}",
                        data.id(i)
                    )));
                }
            }
        }
    }
    for (name, col) in &data.columns {
        for i in 0..data.n() {
            for j in 0..visits {
                if r[i * visits + j] == 1.0 && col[i * visits + j].is_nan() {
                    return Err(Error::validation(format!(
                        "missing value in column {name} at subject {}, visit {j} (observed record)",
                        data.id(i)
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Construct a dataset in memory (used by the simulator and tests). Columns
/// must include `r` and `y` plus the treatment columns for `kind`; every
/// column has length `ids.len() * visits` in subject-major order.
pub fn from_columns(
    ids: Vec<String>,
    visits: usize,
    kind: TreatmentKind,
    columns: Vec<(String, Vec<f64>)>,
) -> Result<LongitudinalDataset> {
    let n = ids.len();
    if n == 0 || visits == 0 {
        return Err(Error::validation("dataset must have at least one subject and visit"));
    }
    {
        let mut seen: Vec<&str> = Vec::new();
        for id in &ids {
            if seen.contains(&id.as_str()) {
                return Err(Error::validation(format!("duplicate subject id '{id}'")));
            }
            seen.push(id);
        }
    }
    let mut index = HashMap::new();
    for (c, (name, values)) in columns.iter().enumerate() {
        if values.len() != n * visits {
            return Err(Error::validation(format!(
                "column '{name}' has {} values, expected {}",
                values.len(),
                n * visits
            )));
        }
        if index.insert(name.clone(), c).is_some() {
            return Err(Error::validation(format!("duplicate column '{name}'")));
        }
    }
    let required: &[&str] = match kind {
        TreatmentKind::Ordinal3 => &["r", "y", "a0", "a1"],
        TreatmentKind::Binary => &["r", "y", "a0"],
        TreatmentKind::Continuous => &["r", "y", "a"],
    };
    for req in required {
        if !index.contains_key(*req) {
            return Err(Error::validation(format!("column '{req}' is required")));
        }
    }
    let covariate_names: Vec<String> = columns
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !required.contains(&n.as_str()))
        .collect();
    for name in &covariate_names {
        validate_column_name(name)?;
    }
    let data = LongitudinalDataset { ids, visits, kind, columns, index, covariate_names };
    validate_invariants(&data)?;
    Ok(data)
}
