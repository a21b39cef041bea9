//! Initial maximum-likelihood weights.
//!
//! Treatment weights are stabilized products of likelihood ratios: at visit
//! `j` the weight is `Π_{k≤j} p̂_num(A_k | treatment history) / p̂_den(A_k |
//! full history)`. Censoring weights invert the fitted retention
//! probabilities, `Π_{k≤j} 1/π̂_k`, optionally multiplied by a fitted
//! treatment-history-only numerator `Π_{k≤j} π̂ˢ_k` (the stabilized
//! variant). The joint weight is their elementwise product, optionally
//! rescaled per visit or in total.
//!
//! Weights cover visits `1..=T` (baseline treatment enters only as
//! history) and are stored with their per-visit factors so the cumulative
//! structure can be checked and preserved under scaling.

use std::io::{Read, Write as IoWrite};
use std::path::Path;

use ndarray::Array1;

use crate::dataset::LongitudinalDataset;
use crate::design::{build_design, response_values, DesignSpec};
use crate::error::{Error, Result};
use crate::glm::{self, HetNormalFit, LogisticFit, PROB_CLAMP};

/// What a weight matrix contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    TreatmentStabilized,
    CensorUnstabilized,
    CensorStabilized,
    Joint,
    Calibrated,
}

impl WeightKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            WeightKind::TreatmentStabilized => "treatment_stabilized",
            WeightKind::CensorUnstabilized => "censor_unstabilized",
            WeightKind::CensorStabilized => "censor_stabilized",
            WeightKind::Joint => "joint",
            WeightKind::Calibrated => "calibrated",
        }
    }

    pub fn parse(s: &str) -> Result<WeightKind> {
        Ok(match s {
            "treatment_stabilized" => WeightKind::TreatmentStabilized,
            "censor_unstabilized" => WeightKind::CensorUnstabilized,
            "censor_stabilized" => WeightKind::CensorStabilized,
            "joint" => WeightKind::Joint,
            "calibrated" => WeightKind::Calibrated,
            other => return Err(Error::validation(format!("unknown weight kind '{other}'"))),
        })
    }
}

/// How combined weights are rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    #[default]
    None,
    /// Each visit's weights sum to that visit's eligible count.
    PerVisitToN,
    /// The grand sum over all defined weights equals n·T.
    TotalToNT,
}

impl Scaling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scaling::None => "none",
            Scaling::PerVisitToN => "per_visit_to_n",
            Scaling::TotalToNT => "total_to_nT",
        }
    }

    pub fn parse(s: &str) -> Result<Scaling> {
        Ok(match s {
            "none" => Scaling::None,
            "per_visit_to_n" | "per-visit" => Scaling::PerVisitToN,
            "total_to_nT" | "total" => Scaling::TotalToNT,
            other => return Err(Error::validation(format!("unknown scaling '{other}'"))),
        })
    }
}

/// Where a weight matrix came from.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    /// Human-readable model identifiers.
    pub models: Vec<String>,
    pub scaling: Option<Scaling>,
    /// Rows where a fitted probability (or density) hit the clamp.
    pub clamped_rows: usize,
    pub notes: Vec<String>,
}

/// Per-(subject, visit) weights for visits 1..=T.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    n: usize,
    t: usize,
    /// `values[i * t + (j-1)]`; NaN where mask = 0.
    values: Vec<f64>,
    /// Visit-j multiplicative factor: `value(i,j) = value(i,j−1)·factor(i,j)`
    /// with `value(i,0) ≡ 1`.
    factors: Vec<f64>,
    mask: Vec<u8>,
    pub kind: WeightKind,
    pub provenance: Provenance,
}

impl WeightMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Last weighted visit T; weights exist for visits 1..=T.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn defined(&self, subject: usize, visit: usize) -> bool {
        debug_assert!((1..=self.t).contains(&visit));
        self.mask[subject * self.t + visit - 1] == 1
    }

    pub fn value(&self, subject: usize, visit: usize) -> f64 {
        self.values[subject * self.t + visit - 1]
    }

    pub fn factor(&self, subject: usize, visit: usize) -> f64 {
        self.factors[subject * self.t + visit - 1]
    }

    /// Rows with mask = 1, in (subject, visit) lexicographic order.
    pub fn defined_rows(&self) -> Vec<(usize, usize)> {
        let mut rows = Vec::new();
        for i in 0..self.n {
            for j in 1..=self.t {
                if self.defined(i, j) {
                    rows.push((i, j));
                }
            }
        }
        rows
    }

    /// Weight values for the given rows, in order.
    pub fn values_for(&self, rows: &[(usize, usize)]) -> Array1<f64> {
        rows.iter().map(|&(i, j)| self.value(i, j)).collect()
    }

    /// Number of defined weights.
    pub fn defined_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Construct from per-visit factors; values are the running products.
    /// The mask must be monotone within subject (a defined visit implies all
    /// earlier visits are defined).
    pub fn from_factors(
        n: usize,
        t: usize,
        factors: Vec<f64>,
        mask: Vec<u8>,
        kind: WeightKind,
        provenance: Provenance,
    ) -> Result<WeightMatrix> {
        debug_assert_eq!(factors.len(), n * t);
        debug_assert_eq!(mask.len(), n * t);
        let mut values = vec![f64::NAN; n * t];
        for i in 0..n {
            let mut run = 1.0;
            let mut alive = true;
            for j in 1..=t {
                let cell = i * t + j - 1;
                if mask[cell] == 1 {
                    if !alive {
                        return Err(Error::validation(format!(
                            "weight mask is not monotone for subject index {i}: \
                             visit {j} is defined after an undefined visit"
                        )));
                    }
                    let f = factors[cell];
                    if !(f > 0.0) || !f.is_finite() {
                        return Err(Error::numerical(format!(
                            "nonpositive weight factor {f} at subject index {i}, visit {j}"
                        )));
                    }
                    run *= f;
                    values[cell] = run;
                } else {
                    alive = false;
                }
            }
        }
        Ok(WeightMatrix { n, t, values, factors, mask, kind, provenance })
    }

    /// Rebuild factors from values (used after calibration, where each
    /// weight is multiplied by its own tilt).
    pub fn from_values(
        n: usize,
        t: usize,
        values: Vec<f64>,
        mask: Vec<u8>,
        kind: WeightKind,
        provenance: Provenance,
    ) -> Result<WeightMatrix> {
        let mut factors = vec![f64::NAN; n * t];
        for i in 0..n {
            let mut prev = 1.0;
            let mut alive = true;
            for j in 1..=t {
                let cell = i * t + j - 1;
                if mask[cell] == 1 {
                    if !alive {
                        return Err(Error::validation(format!(
                            "weight mask is not monotone for subject index {i}: \
                             visit {j} is defined after an undefined visit"
                        )));
                    }
                    let v = values[cell];
                    if !(v > 0.0) || !v.is_finite() {
                        return Err(Error::numerical(format!(
                            "nonpositive weight {v} at subject index {i}, visit {j}"
                        )));
                    }
                    factors[cell] = v / prev;
                    prev = v;
                } else {
                    alive = false;
                }
            }
        }
        Ok(WeightMatrix { n, t, values, factors, mask, kind, provenance })
    }

    /// Multiply each visit's weights by a constant, keeping the cumulative
    /// structure consistent (the visit-j factor picks up s_j / s_{j−1}).
    fn scale_per_visit(&mut self, s: &[f64]) {
        for i in 0..self.n {
            let mut prev = 1.0;
            for j in 1..=self.t {
                let cell = i * self.t + j - 1;
                if self.mask[cell] == 1 {
                    self.values[cell] *= s[j - 1];
                    self.factors[cell] *= s[j - 1] / prev;
                    prev = s[j - 1];
                }
            }
        }
    }

    /// Export as CSV `id,visit,weight,mask,kind` with one row per
    /// (subject, visit), visits 1..=T; undefined weights have an empty
    /// weight field.
    pub fn write_csv<W: IoWrite>(&self, data: &LongitudinalDataset, out: W) -> Result<()> {
        if data.n() != self.n {
            return Err(Error::validation(format!(
                "dataset has {} subjects but the weight matrix has {}",
                data.n(),
                self.n
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "visit", "weight", "mask", "kind"]).map_err(csv_err)?;
        for i in 0..self.n {
            for j in 1..=self.t {
                let cell = i * self.t + j - 1;
                let weight = if self.mask[cell] == 1 {
                    format!("{}", self.values[cell])
                } else {
                    String::new()
                };
                w.write_record([
                    data.id(i),
                    &j.to_string(),
                    &weight,
                    if self.mask[cell] == 1 { "1" } else { "0" },
                    self.kind.as_str(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io("<writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, data: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_csv(data, std::io::BufWriter::new(f))
    }

    /// Read a weight CSV written by [`WeightMatrix::write_csv`], matching
    /// subjects against the dataset by id.
    pub fn read_csv<R: Read>(data: &LongitudinalDataset, reader: R) -> Result<WeightMatrix> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::parse(format!("line 1: {e}")))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let col = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::validation(format!("column '{name}' not found in header")))
        };
        let (id_c, visit_c, weight_c, mask_c, kind_c) =
            (col("id")?, col("visit")?, col("weight")?, col("mask")?, col("kind")?);

        let n = data.n();
        let t = data.t_max();
        if t == 0 {
            return Err(Error::validation("dataset has no follow-up visits to weight"));
        }
        let mut values = vec![f64::NAN; n * t];
        let mut mask = vec![0u8; n * t];
        let mut seen = vec![false; n * t];
        let mut kind: Option<WeightKind> = None;
        for (rec_idx, rec) in rdr.records().enumerate() {
            let line = rec_idx + 2;
            let rec = rec.map_err(|e| Error::parse(format!("line {line}: {e}")))?;
            let field = |c: usize| rec.get(c).unwrap_or("").trim();
            let id = field(id_c);
            let subject = data
                .ids()
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| Error::validation(format!("line {line}: unknown subject id '{id}'")))?;
            let visit: usize = field(visit_c).parse().map_err(|_| {
                Error::parse(format!("line {line}: invalid visit index '{}'", field(visit_c)))
            })?;
            if visit == 0 || visit > t {
                return Err(Error::validation(format!(
                    "line {line}: visit {visit} outside the weighted range 1..={t}"
                )));
            }
            let this_kind = WeightKind::parse(field(kind_c))
                .map_err(|e| Error::validation(format!("line {line}: {e}")))?;
            match kind {
                None => kind = Some(this_kind),
                Some(k) if k == this_kind => {}
                Some(k) => {
                    return Err(Error::validation(format!(
                        "line {line}: mixed weight kinds '{}' and '{}'",
                        k.as_str(),
                        this_kind.as_str()
                    )))
                }
            }
            let cell = subject * t + visit - 1;
            if seen[cell] {
                return Err(Error::validation(format!(
                    "line {line}: duplicate weight for subject {id}, visit {visit}"
                )));
            }
            seen[cell] = true;
            match field(mask_c) {
                "1" => {
                    let v: f64 = field(weight_c).parse().map_err(|_| {
                        Error::parse(format!(
                            "line {line}: invalid weight '{}'",
                            field(weight_c)
                        ))
                    })?;
                    values[cell] = v;
                    mask[cell] = 1;
                }
                "0" => {
                    if !field(weight_c).is_empty() {
                        return Err(Error::validation(format!(
                            "line {line}: weight given on a masked-out row"
                        )));
                    }
                }
                other => {
                    return Err(Error::validation(format!(
                        "line {line}: mask must be 0 or 1, found '{other}'"
                    )))
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            let missing = seen.iter().position(|&s| !s).expect("some cell missing");
            return Err(Error::validation(format!(
                "missing weight row for subject {}, visit {}",
                data.id(missing / t),
                missing % t + 1
            )));
        }
        WeightMatrix::from_values(
            n,
            t,
            values,
            mask,
            kind.ok_or_else(|| Error::validation("weight file contains no rows"))?,
            Provenance { notes: vec!["read from csv".into()], ..Provenance::default() },
        )
    }

    pub fn read_csv_path(data: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<WeightMatrix> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        WeightMatrix::read_csv(data, std::io::BufReader::new(f))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse(format!("csv write failed: {e}"))
}

/// The treatment model for one side (numerator or denominator) of the
/// stabilized weight.
#[derive(Debug, Clone)]
pub enum TreatmentModel {
    /// Ordinal coding: the any-treatment submodel and the intensified
    /// submodel fitted on rows with `a0 = 1`.
    Ordinal {
        a0: (DesignSpec, LogisticFit),
        a1: (DesignSpec, LogisticFit),
    },
    Binary {
        a0: (DesignSpec, LogisticFit),
    },
    Continuous {
        mu_spec: DesignSpec,
        sigma_spec: DesignSpec,
        fit: HetNormalFit,
    },
}

impl TreatmentModel {
    fn describe(&self) -> String {
        match self {
            TreatmentModel::Ordinal { a0, a1 } => {
                format!("ordinal[a0: {}; a1: {}]", a0.0.formula, a1.0.formula)
            }
            TreatmentModel::Binary { a0 } => format!("binary[a0: {}]", a0.0.formula),
            TreatmentModel::Continuous { mu_spec, sigma_spec, .. } => {
                format!("continuous[mu: {}; sigma: {}]", mu_spec.formula, sigma_spec.formula)
            }
        }
    }
}

/// Per-(subject, visit) log-likelihood contributions of a treatment model
/// over visits 1..=T, on rows with r = 1; also counts clamped rows.
fn treatment_log_factors(
    data: &LongitudinalDataset,
    model: &TreatmentModel,
) -> Result<(Vec<f64>, usize)> {
    let t = data.t_max();
    let visits = data.visits();
    let mut logf = vec![f64::NAN; data.n() * t];
    let mut clamped = 0usize;
    match model {
        TreatmentModel::Ordinal { a0, .. } | TreatmentModel::Binary { a0 } => {
            let d0 = build_design(data, &a0.0, (1, t))?;
            let p0 = glm::predict_prob(&a0.1, &d0)?;
            for (row, &(i, j)) in d0.row_index.iter().enumerate() {
                let obs = data.column("a0")?[i * visits + j];
                let p = p0[row];
                if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                    clamped += 1;
                }
                logf[i * t + j - 1] = if obs == 1.0 { p.ln() } else { (1.0 - p).ln() };
            }
            if let TreatmentModel::Ordinal { a1, .. } = model {
                let d1 = build_design(data, &a1.0, (1, t))?;
                let p1 = glm::predict_prob(&a1.1, &d1)?;
                // The intensified factor enters only on rows with a0 = 1,
                // which is exactly the a1-response eligibility.
                for (row, &(i, j)) in d1.row_index.iter().enumerate() {
                    let obs = data.column("a1")?[i * visits + j];
                    let p = p1[row];
                    if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                        clamped += 1;
                    }
                    logf[i * t + j - 1] += if obs == 1.0 { p.ln() } else { (1.0 - p).ln() };
                }
            }
        }
        TreatmentModel::Continuous { mu_spec, sigma_spec, fit } => {
            let dmu = build_design(data, mu_spec, (1, t))?;
            let dsig = build_design(data, sigma_spec, (1, t))?;
            if dmu.row_index != dsig.row_index {
                return Err(Error::validation(
                    "mean and variance designs cover different rows",
                ));
            }
            let mu = glm::predict_mean(fit, &dmu)?;
            let var = glm::predict_variance(fit, &dsig)?;
            let a_col = data.column("a")?;
            for (row, &(i, j)) in dmu.row_index.iter().enumerate() {
                let v = var[row].max(1e-300);
                let d = a_col[i * visits + j] - mu[row];
                logf[i * t + j - 1] =
                    -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v);
            }
        }
    }
    Ok((logf, clamped))
}

/// Stabilized inverse-probability-of-treatment weights: at visit `j`,
/// `Π_{k≤j}` of the numerator likelihood over the denominator likelihood.
/// Defined on rows with r = 1, visits 1..=T.
pub fn treatment_weights(
    data: &LongitudinalDataset,
    numerator: &TreatmentModel,
    denominator: &TreatmentModel,
) -> Result<WeightMatrix> {
    let t = data.t_max();
    if t == 0 {
        return Err(Error::validation("dataset has no follow-up visits to weight"));
    }
    let (log_num, clamp_n) = treatment_log_factors(data, numerator)?;
    let (log_den, clamp_d) = treatment_log_factors(data, denominator)?;
    let n = data.n();
    let mut factors = vec![f64::NAN; n * t];
    let mut mask = vec![0u8; n * t];
    for i in 0..n {
        for j in 1..=t {
            if data.observed(i, j) {
                let cell = i * t + j - 1;
                mask[cell] = 1;
                factors[cell] = (log_num[cell] - log_den[cell]).exp();
            }
        }
    }
    WeightMatrix::from_factors(
        n,
        t,
        factors,
        mask,
        WeightKind::TreatmentStabilized,
        Provenance {
            models: vec![
                format!("numerator: {}", numerator.describe()),
                format!("denominator: {}", denominator.describe()),
            ],
            scaling: None,
            clamped_rows: clamp_n + clamp_d,
            notes: vec![],
        },
    )
}

/// Inverse-probability-of-censoring weights from a pooled retention model
/// `pr(R_j = 1 | R_{j−1} = 1, history)`. Defined on rows with `R_j = 1`:
/// `Π_{k≤j} 1/π̂_k`, multiplied by `Π_{k≤j} π̂ˢ_k` when a stabilizer model
/// (treatment-history-only) is given.
pub fn censoring_weights(
    data: &LongitudinalDataset,
    model: &(DesignSpec, LogisticFit),
    stabilizer: Option<&(DesignSpec, LogisticFit)>,
) -> Result<WeightMatrix> {
    let t = data.t_max();
    if t == 0 {
        return Err(Error::validation("dataset has no follow-up visits to weight"));
    }
    let n = data.n();
    let design = build_design(data, &model.0, (1, t))?;
    let pi = glm::predict_prob(&model.1, &design)?;
    let mut clamped = pi
        .iter()
        .filter(|&&p| p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP)
        .count();

    let mut factors = vec![f64::NAN; n * t];
    let mut mask = vec![0u8; n * t];
    for (row, &(i, j)) in design.row_index.iter().enumerate() {
        if data.observed(i, j) {
            let cell = i * t + j - 1;
            mask[cell] = 1;
            factors[cell] = 1.0 / pi[row];
        }
    }
    let mut kind = WeightKind::CensorUnstabilized;
    let mut models = vec![format!("censoring: {}", model.0.formula)];
    if let Some(stab) = stabilizer {
        let sdesign = build_design(data, &stab.0, (1, t))?;
        let spi = glm::predict_prob(&stab.1, &sdesign)?;
        clamped += spi
            .iter()
            .filter(|&&p| p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP)
            .count();
        for (row, &(i, j)) in sdesign.row_index.iter().enumerate() {
            let cell = i * t + j - 1;
            if mask[cell] == 1 {
                factors[cell] *= spi[row];
            }
        }
        kind = WeightKind::CensorStabilized;
        models.push(format!("stabilizer: {}", stab.0.formula));
    }
    WeightMatrix::from_factors(
        n,
        t,
        factors,
        mask,
        kind,
        Provenance { models, scaling: None, clamped_rows: clamped, notes: vec![] },
    )
}

/// Elementwise product of treatment and (optional) censoring weights,
/// followed by the requested rescaling. The censoring mask must be a subset
/// of the treatment mask.
pub fn combine_and_scale(
    tw: &WeightMatrix,
    cw: Option<&WeightMatrix>,
    scaling: Scaling,
) -> Result<WeightMatrix> {
    let (n, t) = (tw.n, tw.t);
    let mut factors = tw.factors.clone();
    let mut mask = tw.mask.clone();
    let mut provenance = tw.provenance.clone();
    let mut kind = tw.kind;
    if let Some(cw) = cw {
        if cw.n != n || cw.t != t {
            return Err(Error::validation(format!(
                "weight matrices have different shapes: {n}×{t} vs {}×{}",
                cw.n, cw.t
            )));
        }
        for cell in 0..n * t {
            match (tw.mask[cell], cw.mask[cell]) {
                (1, 1) => factors[cell] *= cw.factors[cell],
                (1, 0) => mask[cell] = 0,
                (0, 1) => {
                    return Err(Error::validation(format!(
                        "incompatible masks: censoring weight defined at subject index {}, \
                         visit {} where the treatment weight is not",
                        cell / t,
                        cell % t + 1
                    )))
                }
                _ => {}
            }
        }
        provenance.models.extend(cw.provenance.models.iter().cloned());
        provenance.clamped_rows += cw.provenance.clamped_rows;
        kind = WeightKind::Joint;
    }
    let mut out = WeightMatrix::from_factors(n, t, factors, mask, kind, provenance)?;
    apply_scaling(&mut out, scaling)?;
    Ok(out)
}

fn apply_scaling(w: &mut WeightMatrix, scaling: Scaling) -> Result<()> {
    match scaling {
        Scaling::None => {}
        Scaling::PerVisitToN => {
            let mut s = vec![1.0; w.t];
            for j in 1..=w.t {
                let mut sum = 0.0;
                let mut count = 0usize;
                for i in 0..w.n {
                    if w.defined(i, j) {
                        sum += w.value(i, j);
                        count += 1;
                    }
                }
                if count > 0 {
                    if sum <= 0.0 {
                        return Err(Error::numerical(format!(
                            "cannot scale visit {j}: weight sum is {sum}"
                        )));
                    }
                    s[j - 1] = count as f64 / sum;
                }
            }
            w.scale_per_visit(&s);
        }
        Scaling::TotalToNT => {
            let sum: f64 = w
                .values
                .iter()
                .zip(&w.mask)
                .filter(|(_, &m)| m == 1)
                .map(|(v, _)| v)
                .sum();
            if sum <= 0.0 {
                return Err(Error::numerical(format!("cannot scale: weight sum is {sum}")));
            }
            let c = (w.n * w.t) as f64 / sum;
            // A global constant multiplies every running product once, so it
            // belongs entirely to the first factor.
            for i in 0..w.n {
                for j in 1..=w.t {
                    let cell = i * w.t + j - 1;
                    if w.mask[cell] == 1 {
                        w.values[cell] *= c;
                        if j == 1 {
                            w.factors[cell] *= c;
                        }
                    }
                }
            }
        }
    }
    if scaling != Scaling::None {
        w.provenance.scaling = Some(scaling);
    }
    Ok(())
}

/// Fit a treatment model of the given specs by maximum likelihood.
pub fn fit_treatment_model(
    data: &LongitudinalDataset,
    specs: &TreatmentSpecs,
) -> Result<TreatmentModel> {
    let t = data.t_max();
    match specs {
        TreatmentSpecs::Ordinal { a0, a1 } => {
            let d0 = build_design(data, a0, (1, t))?;
            let y0 = response_values(data, a0, &d0)?;
            let f0 = glm::fit_logistic(&d0, &y0, None)?;
            let d1 = build_design(data, a1, (1, t))?;
            let y1 = response_values(data, a1, &d1)?;
            let f1 = glm::fit_logistic(&d1, &y1, None)?;
            Ok(TreatmentModel::Ordinal { a0: (a0.clone(), f0), a1: (a1.clone(), f1) })
        }
        TreatmentSpecs::Binary { a0 } => {
            let d0 = build_design(data, a0, (1, t))?;
            let y0 = response_values(data, a0, &d0)?;
            let f0 = glm::fit_logistic(&d0, &y0, None)?;
            Ok(TreatmentModel::Binary { a0: (a0.clone(), f0) })
        }
        TreatmentSpecs::Continuous { mu, sigma } => {
            let dmu = build_design(data, mu, (1, t))?;
            let dsig = build_design(data, sigma, (1, t))?;
            let a = response_values(data, mu, &dmu)?;
            let fit = glm::fit_hetnormal(&dmu, &dsig, &a)?;
            Ok(TreatmentModel::Continuous {
                mu_spec: mu.clone(),
                sigma_spec: sigma.clone(),
                fit,
            })
        }
    }
}

/// Formulas for a treatment model, before fitting.
#[derive(Debug, Clone)]
pub enum TreatmentSpecs {
    Ordinal { a0: DesignSpec, a1: DesignSpec },
    Binary { a0: DesignSpec },
    Continuous { mu: DesignSpec, sigma: DesignSpec },
}

impl TreatmentSpecs {
    /// Ordinal specs sharing one formula for both submodels.
    pub fn ordinal(formula: &str) -> TreatmentSpecs {
        TreatmentSpecs::Ordinal {
            a0: DesignSpec::new(formula, "a0"),
            a1: DesignSpec::new(formula, "a1"),
        }
    }
}

/// Fit the pooled censoring (retention) model.
pub fn fit_censoring_model(
    data: &LongitudinalDataset,
    spec: &DesignSpec,
) -> Result<(DesignSpec, LogisticFit)> {
    let t = data.t_max();
    let d = build_design(data, spec, (1, t))?;
    let y = response_values(data, spec, &d)?;
    let fit = glm::fit_logistic(&d, &y, None)?;
    Ok((spec.clone(), fit))
}
