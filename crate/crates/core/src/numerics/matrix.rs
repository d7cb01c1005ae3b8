//! Row-major dense matrices with the handful of kernels the model needs.
//!
//! Everything is 64-bit: the Cholesky factors of kernel matrices at a few
//! hundred inducing points are too ill-conditioned for single precision.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flop count above which a matrix product is split across threads.
const PAR_FLOPS: usize = 4_000_000;

/// Register tile for the product kernels: outputs are computed in MR x NR
/// patches whose accumulators stay in registers, which is what keeps the
/// inner loops from being load/store bound.
const MR: usize = 4;
const NR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "DenseMatrix::from_vec".into(),
                expected: format!("{} values for {}x{}", rows * cols, rows, cols),
                got: data.len().to_string(),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(nrows * ncols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != ncols {
                return Err(Error::DimensionMismatch {
                    context: format!("DenseMatrix::from_rows row {i}"),
                    expected: ncols.to_string(),
                    got: r.len().to_string(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(DenseMatrix {
            rows: nrows,
            cols: ncols,
            data,
        })
    }

    /// Column vector (n x 1) from a slice.
    pub fn column(values: &[f64]) -> Self {
        DenseMatrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        DenseMatrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn as_scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "as_scalar on a non-1x1 matrix");
        self.data[0]
    }

    pub fn col_to_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            let r = self.row(i);
            for (j, &v) in r.iter().enumerate() {
                out.data[j * self.rows + i] = v;
            }
        }
        out
    }

    /// self * other.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let n = other.cols;
        let mut out = Self::zeros(self.rows, n);
        if self.rows == 0 || self.cols == 0 || n == 0 {
            return out;
        }
        let stripe = MR * n;
        if self.rows * self.cols * n >= PAR_FLOPS && rayon::current_num_threads() > 1 {
            out.data
                .par_chunks_mut(stripe)
                .enumerate()
                .for_each(|(t, rows)| self.gemm_stripe(other, rows, t * MR));
        } else {
            for (t, rows) in out.data.chunks_mut(stripe).enumerate() {
                self.gemm_stripe(other, rows, t * MR);
            }
        }
        out
    }

    /// One MR-row stripe of `self * other` written into `rows` (row-major,
    /// possibly fewer than MR rows at the bottom edge). Accumulation is
    /// k-ascending per output element.
    fn gemm_stripe(&self, other: &Self, rows: &mut [f64], i0: usize) {
        let n = other.cols;
        let ib = rows.len() / n;
        let kk = self.cols;
        let mut j0 = 0;
        while j0 < n {
            let jb = NR.min(n - j0);
            if ib == MR && jb == NR {
                let a = [
                    self.row(i0),
                    self.row(i0 + 1),
                    self.row(i0 + 2),
                    self.row(i0 + 3),
                ];
                let mut acc = [[0.0; NR]; MR];
                for k in 0..kk {
                    let b = &other.data[k * n + j0..k * n + j0 + NR];
                    for r in 0..MR {
                        let ark = a[r][k];
                        for c in 0..NR {
                            acc[r][c] += ark * b[c];
                        }
                    }
                }
                for (r, arow) in acc.iter().enumerate() {
                    rows[r * n + j0..r * n + j0 + NR].copy_from_slice(arow);
                }
            } else {
                for r in 0..ib {
                    let ar = self.row(i0 + r);
                    for j in j0..j0 + jb {
                        let mut s = 0.0;
                        for (k, &av) in ar.iter().enumerate() {
                            s += av * other.data[k * n + j];
                        }
                        rows[r * n + j] = s;
                    }
                }
            }
            j0 += jb;
        }
    }

    /// self^T * other.
    pub fn matmul_tn(&self, other: &Self) -> Self {
        assert_eq!(
            self.rows, other.rows,
            "matmul_tn: {}x{} ^T * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        if self.rows * self.cols * other.cols >= PAR_FLOPS {
            return self.transpose().matmul(other);
        }
        let (m, n) = (self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &aki) in a_row.iter().enumerate() {
                if aki != 0.0 {
                    let o_row = &mut out.data[i * n..(i + 1) * n];
                    for (o, &b) in o_row.iter_mut().zip(b_row) {
                        *o += aki * b;
                    }
                }
            }
        }
        out
    }

    /// self * other^T.
    pub fn matmul_nt(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.cols,
            "matmul_nt: {}x{} * {}x{} ^T",
            self.rows, self.cols, other.rows, other.cols
        );
        let n = other.rows;
        let mut out = Self::zeros(self.rows, n);
        if self.rows == 0 || self.cols == 0 || n == 0 {
            return out;
        }
        let stripe = MR * n;
        if self.rows * self.cols * n >= PAR_FLOPS && rayon::current_num_threads() > 1 {
            out.data
                .par_chunks_mut(stripe)
                .enumerate()
                .for_each(|(t, rows)| self.gemm_nt_stripe(other, rows, t * MR));
        } else {
            for (t, rows) in out.data.chunks_mut(stripe).enumerate() {
                self.gemm_nt_stripe(other, rows, t * MR);
            }
        }
        out
    }

    /// One MR-row stripe of `self * other^T`: all-contiguous dot products,
    /// tiled MR x NR, k-ascending per output element.
    fn gemm_nt_stripe(&self, other: &Self, rows: &mut [f64], i0: usize) {
        let n = other.rows;
        let ib = rows.len() / n;
        let kk = self.cols;
        let mut j0 = 0;
        while j0 < n {
            let jb = NR.min(n - j0);
            if ib == MR && jb == NR {
                let a = [
                    self.row(i0),
                    self.row(i0 + 1),
                    self.row(i0 + 2),
                    self.row(i0 + 3),
                ];
                let b = [
                    other.row(j0),
                    other.row(j0 + 1),
                    other.row(j0 + 2),
                    other.row(j0 + 3),
                ];
                let mut acc = [[0.0; NR]; MR];
                for k in 0..kk {
                    for r in 0..MR {
                        let ark = a[r][k];
                        for c in 0..NR {
                            acc[r][c] += ark * b[c][k];
                        }
                    }
                }
                for (r, arow) in acc.iter().enumerate() {
                    rows[r * n + j0..r * n + j0 + NR].copy_from_slice(arow);
                }
            } else {
                for r in 0..ib {
                    let ar = self.row(i0 + r);
                    for j in j0..j0 + jb {
                        let br = other.row(j);
                        let mut s = 0.0;
                        for (&av, &bv) in ar.iter().zip(br) {
                            s += av * bv;
                        }
                        rows[r * n + j] = s;
                    }
                }
            }
            j0 += jb;
        }
    }

    /// self * other^T restricted to the lower triangle; the strict upper of
    /// the (square) result is left zero. Used by adjoints whose consumers
    /// only ever read the lower part.
    pub fn matmul_nt_lower(&self, other: &Self) -> Self {
        assert_eq!(
            self.rows, other.rows,
            "matmul_nt_lower: result {}x{} not square",
            self.rows, other.rows
        );
        assert_eq!(
            self.cols, other.cols,
            "matmul_nt_lower: {}x{} * {}x{} ^T",
            self.rows, self.cols, other.rows, other.cols
        );
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            let ar = self.row(i);
            let mut j0 = 0;
            while j0 <= i {
                let jb = NR.min(i + 1 - j0);
                if jb == NR {
                    let b = [
                        other.row(j0),
                        other.row(j0 + 1),
                        other.row(j0 + 2),
                        other.row(j0 + 3),
                    ];
                    let mut acc = [0.0; NR];
                    for (k, &av) in ar.iter().enumerate() {
                        for c in 0..NR {
                            acc[c] += av * b[c][k];
                        }
                    }
                    out.data[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
                } else {
                    for j in j0..j0 + jb {
                        let br = other.row(j);
                        let mut s = 0.0;
                        for (&av, &bv) in ar.iter().zip(br) {
                            s += av * bv;
                        }
                        out.data[i * n + j] = s;
                    }
                }
                j0 += jb;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let mut out = self.clone();
        for (o, &v) in out.data.iter_mut().zip(&other.data) {
            *o += v;
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let mut out = self.clone();
        for (o, &v) in out.data.iter_mut().zip(&other.data) {
            *o -= v;
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign: shape mismatch");
        for (o, &v) in self.data.iter_mut().zip(&other.data) {
            *o += v;
        }
    }

    /// self += c * other.
    pub fn axpy(&mut self, c: f64, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        for (o, &v) in self.data.iter_mut().zip(&other.data) {
            *o += c * v;
        }
    }

    pub fn scale_inplace(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scale_inplace(c);
        out
    }

    /// Sum of squared entries per column.
    pub fn col_sq_norms(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (a, &v) in acc.iter_mut().zip(self.row(i)) {
                *a += v * v;
            }
        }
        acc
    }

    pub fn frob_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Copy with the strict upper triangle zeroed.
    pub fn lower_triangle(&self) -> Self {
        let mut out = self.clone();
        for i in 0..out.rows {
            for j in (i + 1)..out.cols {
                out.data[i * out.cols + j] = 0.0;
            }
        }
        out
    }

    pub fn is_symmetric_within(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows of `self` selected by `indices`, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}
