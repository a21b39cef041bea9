//! Small dense linear-algebra kernels.
//!
//! The systems solved here are tiny (tens of columns), so the crate carries
//! its own Cholesky factorization, partial-pivoting Gaussian elimination and
//! rank-revealing QR rather than binding to an external LAPACK.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix,
/// or `None` when the matrix is not numerically positive definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Some(l)
}

/// Solve `L Lᵀ x = b` given the lower Cholesky factor `L`.
pub fn cholesky_backsolve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    // Forward substitution: L z = b.
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    // Back substitution: Lᵀ x = z.
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve a symmetric positive-definite system `A x = b` by Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let l = cholesky(a).ok_or_else(|| {
        Error::numerical("matrix is not positive definite; cannot factorize")
    })?;
    Ok(cholesky_backsolve(&l, b))
}

/// Solve a general square system by Gaussian elimination with partial
/// pivoting. Used where symmetry or definiteness is not guaranteed.
pub fn solve_general(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    debug_assert_eq!(n, b.len());
    let mut m = a.clone();
    let mut x = b.clone();
    for k in 0..n {
        // Pivot on the largest remaining entry in column k.
        let mut p = k;
        let mut best = m[(k, k)].abs();
        for i in (k + 1)..n {
            let v = m[(i, k)].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best < 1e-300 || !best.is_finite() {
            return Err(Error::numerical("singular system in Gaussian elimination"));
        }
        if p != k {
            for j in 0..n {
                m.swap((k, j), (p, j));
            }
            x.swap(k, p);
        }
        for i in (k + 1)..n {
            let f = m[(i, k)] / m[(k, k)];
            if f == 0.0 {
                continue;
            }
            for j in (k + 1)..n {
                m[(i, j)] -= f * m[(k, j)];
            }
            m[(i, k)] = 0.0;
            x[i] -= f * x[k];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= m[(i, j)] * x[j];
        }
        x[i] = s / m[(i, i)];
    }
    Ok(x)
}

/// Result of rank detection on a column set.
#[derive(Debug, Clone)]
pub struct ColumnRank {
    /// Numerical rank.
    pub rank: usize,
    /// Indices of a maximal independent column subset, in original order.
    pub kept: Vec<usize>,
    /// Indices of columns dependent on the kept set (or numerically zero),
    /// in original order.
    pub dropped: Vec<usize>,
}

/// Rank-revealing orthogonal decomposition that preserves column order.
///
/// Columns are visited left to right; a column is kept when its residual —
/// after Householder reflections have removed the span of the columns kept
/// so far — exceeds `rel_tol` times the largest initial column norm, and
/// dropped (numerically zero or dependent on earlier kept columns)
/// otherwise. Of two identical columns the first is therefore kept.
pub fn column_rank(a: &Array2<f64>, rel_tol: f64) -> ColumnRank {
    let m = a.nrows();
    let r = a.ncols();
    let mut work = a.clone();
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();

    let col_tail_norm = |w: &Array2<f64>, col: usize, from: usize| -> f64 {
        let mut s = 0.0;
        for i in from..m {
            s += w[(i, col)] * w[(i, col)];
        }
        s.sqrt()
    };

    let largest = (0..r)
        .map(|c| col_tail_norm(&work, c, 0))
        .fold(0.0f64, f64::max);
    let threshold = rel_tol * largest.max(1e-300);

    for c in 0..r {
        let k = kept.len(); // reflections applied so far act on rows k..m
        if k >= m {
            dropped.push(c);
            continue;
        }
        let tail = col_tail_norm(&work, c, k);
        if tail <= threshold {
            dropped.push(c);
            continue;
        }
        // Householder reflection moving column c's tail onto e_k, applied to
        // all later columns so their tails lose this direction.
        let alpha = -work[(k, c)].signum() * tail;
        let mut v = Array1::<f64>::zeros(m - k);
        for i in k..m {
            v[i - k] = work[(i, c)];
        }
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        if vnorm2 > 0.0 {
            for j in (c + 1)..r {
                let mut dot = 0.0;
                for i in k..m {
                    dot += v[i - k] * work[(i, j)];
                }
                let f = 2.0 * dot / vnorm2;
                for i in k..m {
                    work[(i, j)] -= f * v[i - k];
                }
            }
        }
        kept.push(c);
    }

    ColumnRank { rank: kept.len(), kept, dropped }
}

/// Solve the weighted least-squares problem `min Σ wᵢ (yᵢ − xᵢᵀb)²` via the
/// normal equations. The caller is responsible for checking column rank.
pub fn solve_wls(
    x: &Array2<f64>,
    y: &Array1<f64>,
    w: &Array1<f64>,
) -> Result<Array1<f64>> {
    let (xtwx, xtwy) = weighted_normal_equations(x, y, w);
    solve_spd(&xtwx, &xtwy)
        .or_else(|_| solve_general(&xtwx, &xtwy))
        .map_err(|_| Error::numerical("weighted least-squares system is singular"))
}

/// Accumulate `XᵀWX` and `XᵀWy` for diagonal weights.
pub fn weighted_normal_equations(
    x: &Array2<f64>,
    y: &Array1<f64>,
    w: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let (m, p) = (x.nrows(), x.ncols());
    debug_assert_eq!(m, y.len());
    debug_assert_eq!(m, w.len());
    let mut xtwx = Array2::<f64>::zeros((p, p));
    let mut xtwy = Array1::<f64>::zeros(p);
    for i in 0..m {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x[(i, a)];
            if xa == 0.0 {
                continue;
            }
            let wxa = wi * xa;
            xtwy[a] += wxa * y[i];
            for b in a..p {
                xtwx[(a, b)] += wxa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    (xtwx, xtwy)
}

/// Infinity norm of a vector.
pub fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, t| acc.max(t.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let b = array![2.0, 5.0];
        let x = solve_spd(&a, &b).unwrap();
        // Solution of [[4,2],[2,3]] x = [2,5]: x = (-0.5, 2).
        assert!((x[0] - (-0.5)).abs() < 1e-12);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a).is_none());
    }

    #[test]
    fn gaussian_elimination_matches_cholesky() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let b = array![2.0, 5.0];
        let x1 = solve_spd(&a, &b).unwrap();
        let x2 = solve_general(&a, &b).unwrap();
        assert!((x1[0] - x2[0]).abs() < 1e-12);
        assert!((x1[1] - x2[1]).abs() < 1e-12);
    }

    #[test]
    fn rank_detects_duplicate_and_zero_columns() {
        // Columns: x, zero, x again, y. Expect rank 2, keeping columns 0 and 3.
        let a = array![
            [1.0, 0.0, 1.0, 0.0],
            [1.0, 0.0, 1.0, 1.0],
            [1.0, 0.0, 1.0, 2.0]
        ];
        let got = column_rank(&a, 1e-10);
        assert_eq!(got.rank, 2);
        assert_eq!(got.kept, vec![0, 3]);
        assert_eq!(got.dropped, vec![1, 2]);
    }

    #[test]
    fn rank_full_for_independent_columns() {
        let a = array![[1.0, 1.0], [1.0, 2.0], [1.0, 3.0]];
        let got = column_rank(&a, 1e-10);
        assert_eq!(got.rank, 2);
        assert!(got.dropped.is_empty());
    }

    #[test]
    fn wls_recovers_exact_linear_data() {
        // y = 3 - 2 x with arbitrary positive weights: exact fit.
        let x = array![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0]];
        let y = array![3.0, 1.0, -1.0, -3.0];
        let w = array![1.0, 2.0, 0.5, 1.5];
        let b = solve_wls(&x, &y, &w).unwrap();
        assert!((b[0] - 3.0).abs() < 1e-12);
        assert!((b[1] + 2.0).abs() < 1e-12);
    }
}
