//! ARD RBF covariance and Gram-matrix assembly.
//!
//! k(x, x') = sv2 * exp(-1/2 * sum_d ((x_d - x'_d) / l_d)^2), with the
//! signal variance and the per-dimension lengthscales stored in log space
//! so they stay positive under unconstrained optimization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_signal_variance: f64,
    pub log_lengthscales: Vec<f64>,
}

impl KernelParams {
    /// sv2 = 1, l_d = 1 for every dimension: the standard initialization.
    pub fn unit(input_dim: usize) -> Self {
        KernelParams {
            log_signal_variance: 0.0,
            log_lengthscales: vec![0.0; input_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    /// Per-dimension 1 / l_d^2, the form every kernel loop wants.
    pub(crate) fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales
            .iter()
            .map(|l| (-2.0 * l).exp())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct KernelMatrices {
    pub k_mm: DenseMatrix,
    pub k_nm: DenseMatrix,
    pub k_nn_diag: Vec<f64>,
}

pub fn rbf(params: &KernelParams, x: &[f64], x2: &[f64]) -> Result<f64> {
    if x.len() != params.input_dim() || x2.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "rbf".into(),
            expected: format!("two vectors of length {}", params.input_dim()),
            got: format!("{} and {}", x.len(), x2.len()),
        });
    }
    let inv_sq = params.inv_sq_lengthscales();
    Ok(params.signal_variance() * rbf_unit(x, x2, &inv_sq))
}

/// exp(-1/2 * weighted squared distance); caller applies the signal variance.
#[inline]
fn rbf_unit(x: &[f64], x2: &[f64], inv_sq_lengthscales: &[f64]) -> f64 {
    let mut q = 0.0;
    for ((&a, &b), &w) in x.iter().zip(x2).zip(inv_sq_lengthscales) {
        let d = a - b;
        q += d * d * w;
    }
    (-0.5 * q).exp()
}

/// All kernel blocks the expert needs: K_MM over Z, the cross block
/// K_NM, and the diagonal of K_NN (constant sv2 for an RBF). The full
/// N x N Gram is never formed.
pub fn gram(params: &KernelParams, x: &DenseMatrix, z: &DenseMatrix) -> Result<KernelMatrices> {
    let d = params.input_dim();
    if x.cols() != d || z.cols() != d {
        return Err(Error::DimensionMismatch {
            context: "gram".into(),
            expected: format!("{d} columns"),
            got: format!("X has {}, Z has {}", x.cols(), z.cols()),
        });
    }
    Ok(KernelMatrices {
        k_mm: gram_sym(params, z),
        k_nm: gram_cross(params, x, z),
        k_nn_diag: vec![params.signal_variance(); x.rows()],
    })
}

pub(crate) fn gram_sym(params: &KernelParams, z: &DenseMatrix) -> DenseMatrix {
    let m = z.rows();
    let sv2 = params.signal_variance();
    let inv_sq = params.inv_sq_lengthscales();
    let mut out = DenseMatrix::zeros(m, m);
    for i in 0..m {
        out.set(i, i, sv2);
        for j in 0..i {
            let v = sv2 * rbf_unit(z.row(i), z.row(j), &inv_sq);
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

pub(crate) fn gram_cross(params: &KernelParams, x: &DenseMatrix, z: &DenseMatrix) -> DenseMatrix {
    let (n, m) = (x.rows(), z.rows());
    let sv2 = params.signal_variance();
    let inv_sq = params.inv_sq_lengthscales();
    let mut out = DenseMatrix::zeros(n, m);
    let fill = |i: usize, row: &mut [f64]| {
        let xi = x.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = sv2 * rbf_unit(xi, z.row(j), &inv_sq);
        }
    };
    if n * m * x.cols() >= 1 << 22 && n > 1 {
        out.data_mut()
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, row)| fill(i, row));
    } else {
        for i in 0..n {
            let row = &mut out.data_mut()[i * m..(i + 1) * m];
            fill(i, row);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cholesky_psd, RngStream};

    #[test]
    fn zero_distance_gives_signal_variance() {
        let p = KernelParams {
            log_signal_variance: 0.7,
            log_lengthscales: vec![0.1, -0.3],
        };
        let x = [1.5, -2.0];
        let v = rbf(&p, &x, &x).unwrap();
        assert!((v - 0.7f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn unit_params_distance_sqrt2() {
        // |x - x'|^2 = 2 with sv2 = l = 1 gives exp(-1).
        let p = KernelParams::unit(2);
        let v = rbf(&p, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 0.36787944117144233).abs() < 1e-15);
        assert!((v - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn long_lengthscale_saturates_to_signal_variance() {
        let p = KernelParams {
            log_signal_variance: 0.3,
            log_lengthscales: vec![20.0],
        };
        let v = rbf(&p, &[0.0], &[5.0]).unwrap();
        assert!((v - p.signal_variance()).abs() < 1e-9 * p.signal_variance());
    }

    #[test]
    fn rbf_is_symmetric_in_arguments() {
        let p = KernelParams {
            log_signal_variance: -0.2,
            log_lengthscales: vec![0.4, -0.1, 0.0],
        };
        let a = [0.3, 1.0, -2.0];
        let b = [1.1, -0.5, 0.7];
        assert_eq!(rbf(&p, &a, &b).unwrap(), rbf(&p, &b, &a).unwrap());
    }

    #[test]
    fn rbf_rejects_wrong_dims() {
        let p = KernelParams::unit(2);
        assert!(rbf(&p, &[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn self_gram_is_symmetric_and_matches_cross() {
        let p = KernelParams::unit(3);
        let x = DenseMatrix::from_vec(4, 3, RngStream::new(0, 0).std_normal(12)).unwrap();
        let g = gram(&p, &x, &x).unwrap();
        assert!(g.k_mm.is_symmetric_within(0.0));
        assert_eq!(g.k_mm.data(), g.k_nm.data());
        assert_eq!(g.k_nn_diag, vec![1.0; 4]);
    }

    #[test]
    fn single_point_gram_matches_rbf() {
        let p = KernelParams {
            log_signal_variance: 0.5,
            log_lengthscales: vec![0.2],
        };
        let x = DenseMatrix::from_vec(1, 1, vec![0.3]).unwrap();
        let z = DenseMatrix::from_vec(1, 1, vec![-1.0]).unwrap();
        let g = gram(&p, &x, &z).unwrap();
        assert_eq!(g.k_nm.get(0, 0), rbf(&p, &[0.3], &[-1.0]).unwrap());
        assert_eq!(g.k_mm.get(0, 0), p.signal_variance());
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        // Cholesky with tiny jitter stands in for an eigenvalue check:
        // it succeeds iff min eigenvalue >= -1e-10 * sv2 territory.
        let p = KernelParams {
            log_signal_variance: 0.4,
            log_lengthscales: vec![0.0, -0.5, 0.3],
        };
        for seed in 0..5 {
            let z = DenseMatrix::from_vec(5, 3, RngStream::new(seed, 1).std_normal(15)).unwrap();
            let g = gram(&p, &z, &z).unwrap();
            let f = cholesky_psd(&g.k_mm, 1e-10 * p.signal_variance()).unwrap();
            assert!(f.jitter_used() <= 1e-9 * p.signal_variance());
        }
    }

    #[test]
    fn rbf_gradients_match_finite_differences() {
        // d rbf / d log_sv = rbf; d rbf / d log_l_d = rbf * u_d^2 / l_d^2.
        let x = [0.4, -1.2];
        let z = [1.0, 0.3];
        let p = KernelParams {
            log_signal_variance: 0.3,
            log_lengthscales: vec![-0.2, 0.5],
        };
        let h = 1e-5;
        let k = rbf(&p, &x, &z).unwrap();

        let mut p_hi = p.clone();
        p_hi.log_signal_variance += h;
        let mut p_lo = p.clone();
        p_lo.log_signal_variance -= h;
        let fd_sv = (rbf(&p_hi, &x, &z).unwrap() - rbf(&p_lo, &x, &z).unwrap()) / (2.0 * h);
        assert!(((fd_sv - k) / k).abs() < 1e-5);

        let inv_sq = p.inv_sq_lengthscales();
        for d in 0..2 {
            let mut p_hi = p.clone();
            p_hi.log_lengthscales[d] += h;
            let mut p_lo = p.clone();
            p_lo.log_lengthscales[d] -= h;
            let fd = (rbf(&p_hi, &x, &z).unwrap() - rbf(&p_lo, &x, &z).unwrap()) / (2.0 * h);
            let u = x[d] - z[d];
            let analytic = k * u * u * inv_sq[d];
            assert!(
                ((fd - analytic) / analytic).abs() < 1e-5,
                "dim {d}: fd {fd} vs analytic {analytic}"
            );
        }
    }
}
