//! Cholesky factorization with a jitter ladder, and triangular solves.

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Default base jitter for kernel matrices; escalated x10 per retry.
pub const BASE_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CholeskyFactor {
    lower: DenseMatrix,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn into_lower(self) -> DenseMatrix {
        self.lower
    }

    /// log det of the factored matrix (A + jitter I) = 2 * sum(log diag L).
    pub fn log_det(&self) -> f64 {
        let n = self.lower.rows();
        2.0 * (0..n).map(|i| self.lower.get(i, i).ln()).sum::<f64>()
    }
}

/// Factor `A + jI = L L^T` for the smallest jitter `j` in
/// `{0, base, 10*base, ..., 1e6*base}` that admits a factorization with a
/// strictly positive diagonal.
pub fn cholesky_psd(a: &DenseMatrix, base_jitter: f64) -> Result<CholeskyFactor> {
    if a.rows() != a.cols() {
        return Err(Error::NonSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let ladder = std::iter::once(0.0).chain((0..=6).map(|k| base_jitter * 10f64.powi(k)));
    for jitter in ladder {
        if let Some(lower) = try_factor(a, jitter) {
            return Ok(CholeskyFactor {
                lower,
                jitter_used: jitter,
            });
        }
        if base_jitter <= 0.0 {
            break;
        }
    }
    Err(Error::NotPositiveDefinite {
        max_jitter: base_jitter * 1e6,
    })
}

/// Row-oriented in-place Cholesky reading the lower triangle of `a`.
fn try_factor(a: &DenseMatrix, jitter: f64) -> Option<DenseMatrix> {
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for k in 0..=i {
            let mut s = 0.0;
            {
                let ri = l.row(i);
                let rk = l.row(k);
                for (x, y) in ri[..k].iter().zip(&rk[..k]) {
                    s += x * y;
                }
            }
            if k == i {
                let d = a.get(i, i) + jitter - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l.set(i, i, d.sqrt());
            } else {
                let v = (a.get(i, k) - s) / l.get(k, k);
                if !v.is_finite() {
                    return None;
                }
                l.set(i, k, v);
            }
        }
    }
    Some(l)
}

/// Solve `L X = B` (or `L^T X = B` when `transposed`) for lower-triangular L.
pub fn tri_solve(l: &CholeskyFactor, b: &DenseMatrix, transposed: bool) -> Result<DenseMatrix> {
    tri_solve_lower(l.lower(), b, transposed)
}

pub(crate) fn tri_solve_lower(
    l: &DenseMatrix,
    b: &DenseMatrix,
    transposed: bool,
) -> Result<DenseMatrix> {
    let n = l.rows();
    if l.cols() != n {
        return Err(Error::NonSquare {
            rows: l.rows(),
            cols: l.cols(),
        });
    }
    if b.rows() != n {
        return Err(Error::DimensionMismatch {
            context: "tri_solve".into(),
            expected: format!("{} rows", n),
            got: format!("{} rows", b.rows()),
        });
    }
    let ncols = b.cols();
    let mut x = b.clone();
    if !transposed {
        // Forward substitution, all right-hand sides at once. Source rows
        // are consumed four at a time so the update is compute-bound
        // rather than one load-modify-store sweep per coefficient.
        for i in 0..n {
            let li = l.row(i);
            let (done, rest) = x.data_mut().split_at_mut(i * ncols);
            let xi = &mut rest[..ncols];
            let mut k = 0;
            while k + 4 <= i {
                let c = [li[k], li[k + 1], li[k + 2], li[k + 3]];
                let base = k * ncols;
                let x0 = &done[base..base + ncols];
                let x1 = &done[base + ncols..base + 2 * ncols];
                let x2 = &done[base + 2 * ncols..base + 3 * ncols];
                let x3 = &done[base + 3 * ncols..base + 4 * ncols];
                for ((((o, &v0), &v1), &v2), &v3) in
                    xi.iter_mut().zip(x0).zip(x1).zip(x2).zip(x3)
                {
                    *o -= c[0] * v0 + c[1] * v1 + c[2] * v2 + c[3] * v3;
                }
                k += 4;
            }
            for (kt, &c) in li[k..i].iter().enumerate() {
                if c != 0.0 {
                    let xk = &done[(k + kt) * ncols..(k + kt + 1) * ncols];
                    for (o, &v) in xi.iter_mut().zip(xk) {
                        *o -= c * v;
                    }
                }
            }
            let inv = 1.0 / li[i];
            for o in xi.iter_mut() {
                *o *= inv;
            }
        }
    } else {
        // Back substitution against L^T; L is read by columns.
        for i in (0..n).rev() {
            let (head, tail) = x.data_mut().split_at_mut((i + 1) * ncols);
            let xi = &mut head[i * ncols..];
            let mut k = i + 1;
            while k + 4 <= n {
                let c = [l.get(k, i), l.get(k + 1, i), l.get(k + 2, i), l.get(k + 3, i)];
                let base = (k - i - 1) * ncols;
                let x0 = &tail[base..base + ncols];
                let x1 = &tail[base + ncols..base + 2 * ncols];
                let x2 = &tail[base + 2 * ncols..base + 3 * ncols];
                let x3 = &tail[base + 3 * ncols..base + 4 * ncols];
                for ((((o, &v0), &v1), &v2), &v3) in
                    xi.iter_mut().zip(x0).zip(x1).zip(x2).zip(x3)
                {
                    *o -= c[0] * v0 + c[1] * v1 + c[2] * v2 + c[3] * v3;
                }
                k += 4;
            }
            while k < n {
                let c = l.get(k, i);
                if c != 0.0 {
                    let xk = &tail[(k - i - 1) * ncols..(k - i) * ncols];
                    for (o, &v) in xi.iter_mut().zip(xk) {
                        *o -= c * v;
                    }
                }
                k += 1;
            }
            let inv = 1.0 / l.get(i, i);
            for o in xi.iter_mut() {
                *o *= inv;
            }
        }
    }
    Ok(x)
}

/// Solve `L X = B` (or `L^T X = B` when `transposed`) where B is square and
/// lower-triangular, computing only the lower triangle of X. For the plain
/// solve the full solution is itself exactly lower-triangular, so nothing is
/// lost; for the transposed solve the strict upper is simply not wanted by
/// any caller. The result's strict upper triangle is zero.
pub(crate) fn tri_solve_lower_tri(
    l: &DenseMatrix,
    b: &DenseMatrix,
    transposed: bool,
) -> Result<DenseMatrix> {
    let n = l.rows();
    if l.cols() != n {
        return Err(Error::NonSquare {
            rows: l.rows(),
            cols: l.cols(),
        });
    }
    if b.rows() != n || b.cols() != n {
        return Err(Error::DimensionMismatch {
            context: "tri_solve_lower_tri".into(),
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    let mut x = DenseMatrix::zeros(n, n);
    if !transposed {
        // Row i of X only has columns ..=i, and draws on rows k < i of X,
        // themselves only populated through column k.
        for i in 0..n {
            let li = l.row(i);
            let (done, rest) = x.data_mut().split_at_mut(i * n);
            let xi = &mut rest[..=i];
            xi.copy_from_slice(&b.row(i)[..=i]);
            for (k, &c) in li[..i].iter().enumerate() {
                if c != 0.0 {
                    let xk = &done[k * n..k * n + k + 1];
                    for (o, &v) in xi.iter_mut().zip(xk) {
                        *o -= c * v;
                    }
                }
            }
            let inv = 1.0 / li[i];
            for o in xi.iter_mut() {
                *o *= inv;
            }
        }
    } else {
        // Row i needs columns ..=i of the already-solved rows k > i, which
        // those rows always have.
        for i in (0..n).rev() {
            let (head, tail) = x.data_mut().split_at_mut((i + 1) * n);
            let xi = &mut head[i * n..i * n + i + 1];
            xi.copy_from_slice(&b.row(i)[..=i]);
            let mut k = i + 1;
            while k + 4 <= n {
                let c = [l.get(k, i), l.get(k + 1, i), l.get(k + 2, i), l.get(k + 3, i)];
                let base = (k - i - 1) * n;
                let x0 = &tail[base..base + i + 1];
                let x1 = &tail[base + n..base + n + i + 1];
                let x2 = &tail[base + 2 * n..base + 2 * n + i + 1];
                let x3 = &tail[base + 3 * n..base + 3 * n + i + 1];
                for ((((o, &v0), &v1), &v2), &v3) in
                    xi.iter_mut().zip(x0).zip(x1).zip(x2).zip(x3)
                {
                    *o -= c[0] * v0 + c[1] * v1 + c[2] * v2 + c[3] * v3;
                }
                k += 4;
            }
            while k < n {
                let c = l.get(k, i);
                if c != 0.0 {
                    let base = (k - i - 1) * n;
                    let xk = &tail[base..base + i + 1];
                    for (o, &v) in xi.iter_mut().zip(xk) {
                        *o -= c * v;
                    }
                }
                k += 1;
            }
            let inv = 1.0 / l.get(i, i);
            for o in xi.iter_mut() {
                *o *= inv;
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_factors_without_jitter() {
        let f = cholesky_psd(&DenseMatrix::identity(2), 1e-6).unwrap();
        assert_eq!(f.jitter_used(), 0.0);
        assert_eq!(f.lower().data(), DenseMatrix::identity(2).data());
    }

    #[test]
    fn hand_cholesky_2x2() {
        let a = mat(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let f = cholesky_psd(&a, 1e-6).unwrap();
        let l = f.lower();
        assert!((l.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((l.get(1, 0) - 1.0).abs() < 1e-15);
        assert!((l.get(1, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l.get(0, 1), 0.0);
        // L L^T reproduces A.
        let rec = l.matmul_nt(l);
        assert!(rec.max_abs_diff(&a) < 1e-14);
    }

    #[test]
    fn rank_deficient_needs_jitter() {
        let a = mat(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let f = cholesky_psd(&a, 1e-6).unwrap();
        assert!(f.jitter_used() >= 1e-6);
    }

    #[test]
    fn non_square_rejected() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            cholesky_psd(&a, 1e-6),
            Err(Error::NonSquare { .. })
        ));
    }

    #[test]
    fn hopeless_matrix_errors() {
        let a = mat(&[&[-1e12, 0.0], &[0.0, -1e12]]);
        assert!(matches!(
            cholesky_psd(&a, 1e-6),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn forward_solve_by_hand() {
        let a = mat(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let f = cholesky_psd(&a, 0.0).unwrap();
        let b = mat(&[&[4.0], &[3.0]]);
        let x = tri_solve(&f, &b, false).unwrap();
        assert!((x.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((x.get(1, 0) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn transposed_solve_by_hand() {
        let a = mat(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let f = cholesky_psd(&a, 0.0).unwrap();
        let b = mat(&[&[2.0], &[2f64.sqrt()]]);
        let x = tri_solve(&f, &b, true).unwrap();
        assert!((x.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((x.get(1, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_solve_returns_b() {
        let f = cholesky_psd(&DenseMatrix::identity(3), 0.0).unwrap();
        let b = mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let x = tri_solve(&f, &b, false).unwrap();
        assert_eq!(x.data(), b.data());
    }

    #[test]
    fn lower_rhs_solve_matches_masked_dense_solve() {
        // Size 7 so both the four-wide blocks and the scalar tails run.
        let n = 7;
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, 1.0 / ((i + j + 1) as f64));
            }
            a.set(i, i, a.get(i, i) + 0.5);
        }
        let f = cholesky_psd(&a, 0.0).unwrap();
        let mut b = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                b.set(i, j, (i + 1) as f64 / (j + 2) as f64);
            }
        }
        for transposed in [false, true] {
            let dense = tri_solve_lower(f.lower(), &b, transposed)
                .unwrap()
                .lower_triangle();
            let restricted = tri_solve_lower_tri(f.lower(), &b, transposed).unwrap();
            assert!(
                restricted.max_abs_diff(&dense) < 1e-12,
                "transposed={transposed}"
            );
        }
    }

    #[test]
    fn solve_roundtrip_multi_rhs() {
        let a = mat(&[
            &[6.0, 2.0, 1.0],
            &[2.0, 5.0, 2.0],
            &[1.0, 2.0, 4.0],
        ]);
        let f = cholesky_psd(&a, 0.0).unwrap();
        let b = mat(&[&[1.0, -2.0], &[0.5, 3.0], &[-1.0, 0.0]]);
        let x = tri_solve(&f, &b, false).unwrap();
        let rec = f.lower().matmul(&x);
        assert!(rec.max_abs_diff(&b) < 1e-12);
        let y = tri_solve(&f, &b, true).unwrap();
        let rec_t = f.lower().transpose().matmul(&y);
        assert!(rec_t.max_abs_diff(&b) < 1e-12);
    }
}
