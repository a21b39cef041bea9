//! Oracle helpers shared by the integration suites.
#![allow(dead_code)]

use ipwcal::dataset::{from_columns, LongitudinalDataset, TreatmentKind};
use ipwcal::design::DesignMatrix;
use ipwcal::restrictions::{CensoringTarget, RestrictionFamily, RestrictionSystem};
use ipwcal::rng::replicate_rng;
use ndarray::{Array1, Array2};
use rand::Rng as _;

/// Random ordinal cohort with monotone dropout: small values keep the
/// floating-point error of the restriction identities far below the 1e-10
/// bound.
pub fn random_cohort(seed: u64) -> LongitudinalDataset {
    let mut rng = replicate_rng(9000, seed);
    let n = 20;
    let visits = 5; // T = 4
    let mut r = Vec::new();
    let mut y = Vec::new();
    let mut a0 = Vec::new();
    let mut a1 = Vec::new();
    let mut x = Vec::new();
    for _ in 0..n {
        let mut alive = true;
        for j in 0..visits {
            if j > 0 && alive && rng.random::<f64>() < 0.25 {
                alive = false;
            }
            if j == 0 || alive {
                r.push(1.0);
                y.push(rng.random_range(-1.0..1.0));
                let t0 = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                let t1 = if t0 == 1.0 && rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                a0.push(t0);
                a1.push(t1);
                x.push(rng.random_range(-1.0..1.0));
            } else {
                r.push(0.0);
                y.push(f64::NAN);
                a0.push(f64::NAN);
                a1.push(f64::NAN);
                x.push(f64::NAN);
            }
        }
    }
    from_columns(
        (0..n).map(|i| format!("u{i}")).collect(),
        visits,
        TreatmentKind::Ordinal3,
        vec![
            ("r".into(), r),
            ("y".into(), y),
            ("a0".into(), a0),
            ("a1".into(), a1),
            ("x".into(), x),
        ],
    )
    .unwrap()
}

/// Complete-case (subject, visit) rows at visits 1..=T.
pub fn complete_rows(data: &LongitudinalDataset) -> Vec<(usize, usize)> {
    let mut rows = Vec::new();
    for i in 0..data.n() {
        for j in 1..=data.t_max() {
            if data.observed(i, j) {
                rows.push((i, j));
            }
        }
    }
    rows
}

/// Lookup from (subject, visit) to the design row, `usize::MAX` when absent.
pub fn lookup(design: &DesignMatrix, n: usize, visits: usize) -> Vec<usize> {
    let mut lut = vec![usize::MAX; n * visits];
    for (row, &(i, j)) in design.row_index.iter().enumerate() {
        lut[i * visits + j] = row;
    }
    lut
}

/// The difference form of the censoring balance, computed with nested loops
/// that share nothing with the builder: the visit-j comparison between
/// reweighted complete cases and the carried previous-visit
/// pseudo-population, weighted `c_j`, with the conventions `R_i0 = 1`,
/// `w_i0 = 1`, and stabilizer `s ≡ 1` when absent.
pub fn difference_form_residual(
    data: &LongitudinalDataset,
    probe: &DesignMatrix,
    w_flat: &[f64],
    target: CensoringTarget,
    s_flat: Option<&[f64]>,
) -> Array1<f64> {
    let n = data.n();
    let t = data.t_max();
    let visits = data.visits();
    let lut = lookup(probe, n, visits);
    let r_col = data.column("r").unwrap();
    let w_at = |i: usize, j: usize| if j == 0 { 1.0 } else { w_flat[i * visits + j] };
    let r_at = |i: usize, j: usize| if j == 0 { 1.0 } else { r_col[i * visits + j] };
    let s_at = |i: usize, j: usize| s_flat.map_or(1.0, |s| s[i * visits + j]);
    let mut out = Array1::zeros(probe.ncols());
    for j in 1..=t {
        let c_j = match target {
            CensoringTarget::Repeated => (t - j + 1) as f64,
            CensoringTarget::Eventual => 1.0,
        };
        for i in 0..n {
            if r_at(i, j - 1) != 1.0 {
                continue; // no one at risk, nothing to compare
            }
            let current = if r_at(i, j) == 1.0 { w_at(i, j) } else { 0.0 };
            let carried = w_at(i, j - 1) * s_at(i, j);
            let term = current - carried;
            let row = lut[i * visits + j];
            assert_ne!(row, usize::MAX, "probe row must exist for at-risk ({i}, {j})");
            for q in 0..probe.ncols() {
                out[q] += c_j * term * probe.x[[row, q]];
            }
        }
    }
    out
}

/// Random positive weights over the complete-case rows, plus a flat
/// (subject, visit) table of the same values.
pub fn random_weights(
    data: &LongitudinalDataset,
    rows: &[(usize, usize)],
    seed: u64,
) -> (Array1<f64>, Vec<f64>) {
    let mut rng = replicate_rng(9100, seed);
    let mut w = Array1::zeros(rows.len());
    let mut flat = vec![f64::NAN; data.n() * data.visits()];
    for (k, &(i, j)) in rows.iter().enumerate() {
        let v = rng.random_range(0.2..2.0);
        w[k] = v;
        flat[i * data.visits() + j] = v;
    }
    (w, flat)
}

/// A one-column system over `m` rows with a 0/1 restriction column: the
/// stationarity condition `e^λ·Σ_{k=1} w₀ = l` has the explicit solution
/// `λ = log(l / Σ_{k=1} w₀)`.
pub fn binary_column_system(m: usize, ones: &[usize], l: f64) -> RestrictionSystem {
    let mut k = Array2::zeros((m, 1));
    for &i in ones {
        k[[i, 0]] = 1.0;
    }
    RestrictionSystem {
        k,
        l: Array1::from_vec(vec![l]),
        row_index: (0..m).map(|i| (i, 1)).collect(),
        column_labels: vec!["membership".into()],
        families: vec![RestrictionFamily::Censoring],
        probe_spec: vec!["single 0/1 membership column".into()],
    }
}
