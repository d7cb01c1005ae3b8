//! One sparse variational GP expert per view.
//!
//! An expert keeps M inducing locations Z shared across the C per-class
//! latent functions, a variational mean column per class, and one
//! lower-triangular covariance factor per class (S_c = L_c L_c^T). The
//! variational marginals at a batch, the KL to the prior, and the
//! expected Gaussian log-likelihood are all closed-form; together they
//! give the per-view evidence lower bound
//!
//!   elbo = scale * E_q[log p(y_tilde | f)] - beta * KL[q(u) || p(u)].
//!
//! Every K_MM^{-1} application goes through one Cholesky factor and
//! triangular solves; no matrix is ever inverted explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelParams};
use crate::labels::TransformedLabels;
use crate::numerics::{cholesky_psd, tri_solve, DenseMatrix};

/// Smallest variance q_f_marginals will report; keeps the product-of-experts
/// precisions finite.
pub const VAR_FLOOR: f64 = 1e-8;

/// Jitter for factorizations of an inducing-point gram matrix.
///
/// Larger than the generic numerics default on purpose. Training can shrink
/// the lengthscales until K_MM is numerically singular, and with m and L_S
/// expressed directly in u-space the KL curvature grows like
/// 1 / lambda_min(K_MM); a 1e-6 floor turns that into a cliff no first-order
/// step size survives. The training tape adds this to K_MM outright so the
/// objective stays smooth in the parameters; the ops here pass it to the
/// escalation ladder as the base, which still tries zero jitter first, so
/// well-conditioned grams (and every hand-checkable small case) factor
/// exactly, while a trained near-singular K_MM lands on the same operator
/// K_MM + jitter I the optimizer saw.
pub const KMM_BASE_JITTER: f64 = 1e-4;

/// Lower-triangular M x M factor stored packed row by row, with the
/// diagonal kept in log space so it stays positive under gradient steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackedTri {
    m: usize,
    diag_only: bool,
    values: Vec<f64>,
}

impl PackedTri {
    pub fn packed_len(m: usize, diag_only: bool) -> usize {
        if diag_only {
            m
        } else {
            m * (m + 1) / 2
        }
    }

    /// Build from an explicit lower-triangular matrix with positive diagonal.
    pub fn from_lower(l: &DenseMatrix, diag_only: bool) -> Self {
        let m = l.rows();
        let mut values = Vec::with_capacity(Self::packed_len(m, diag_only));
        for i in 0..m {
            if diag_only {
                values.push(l.get(i, i).ln());
            } else {
                for j in 0..i {
                    values.push(l.get(i, j));
                }
                values.push(l.get(i, i).ln());
            }
        }
        PackedTri {
            m,
            diag_only,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn diag_only(&self) -> bool {
        self.diag_only
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Expand to a dense lower-triangular matrix, exponentiating the diagonal.
    pub fn to_lower(&self) -> DenseMatrix {
        let mut l = DenseMatrix::zeros(self.m, self.m);
        if self.diag_only {
            for i in 0..self.m {
                l.set(i, i, self.values[i].exp());
            }
        } else {
            let mut k = 0;
            for i in 0..self.m {
                for j in 0..i {
                    l.set(i, j, self.values[k]);
                    k += 1;
                }
                l.set(i, i, self.values[k].exp());
                k += 1;
            }
        }
        l
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertParams {
    pub kernel: KernelParams,
    /// M x D inducing locations.
    pub z: DenseMatrix,
    /// M x C variational means, one column per class.
    pub m: DenseMatrix,
    /// One covariance factor per class.
    pub l_s: Vec<PackedTri>,
    /// Floor applied to predictive variances.
    pub var_floor: f64,
}

impl ExpertParams {
    /// Fresh expert: m = 0 and S_c = K_MM for every class, so q(u) starts
    /// at the prior and the KL term starts at zero.
    pub fn init(
        kernel: KernelParams,
        z: DenseMatrix,
        num_classes: usize,
        diag_only: bool,
    ) -> Result<Self> {
        if z.cols() != kernel.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "ExpertParams::init".into(),
                expected: format!("Z with {} columns", kernel.input_dim()),
                got: format!("{} columns", z.cols()),
            });
        }
        if z.rows() == 0 {
            return Err(Error::EmptyInput("inducing locations"));
        }
        let k_mm = kernel::gram_sym(&kernel, &z);
        let factor = cholesky_psd(&k_mm, KMM_BASE_JITTER)?;
        let init = if diag_only {
            // Diagonal option keeps only the prior marginal scales.
            let mut d = DenseMatrix::zeros(z.rows(), z.rows());
            for i in 0..z.rows() {
                let s_ii = k_mm.get(i, i) + factor.jitter_used();
                d.set(i, i, s_ii.sqrt());
            }
            d
        } else {
            factor.lower().clone()
        };
        let l_s = vec![PackedTri::from_lower(&init, diag_only); num_classes];
        Ok(ExpertParams {
            kernel,
            m: DenseMatrix::zeros(z.rows(), num_classes),
            z,
            l_s,
            var_floor: VAR_FLOOR,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.z.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.m.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_inducing();
        if self.kernel.input_dim() != self.z.cols() {
            return Err(Error::DimensionMismatch {
                context: "ExpertParams kernel/Z".into(),
                expected: format!("{} dims", self.z.cols()),
                got: format!("{} dims", self.kernel.input_dim()),
            });
        }
        if self.m.rows() != m {
            return Err(Error::DimensionMismatch {
                context: "ExpertParams m".into(),
                expected: format!("{m} rows"),
                got: format!("{} rows", self.m.rows()),
            });
        }
        if self.l_s.len() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                context: "ExpertParams L_S".into(),
                expected: format!("{} factors", self.num_classes()),
                got: format!("{}", self.l_s.len()),
            });
        }
        for t in &self.l_s {
            if t.dim() != m || t.values().len() != PackedTri::packed_len(m, t.diag_only()) {
                return Err(Error::DimensionMismatch {
                    context: "ExpertParams L_S factor".into(),
                    expected: format!("dim {m}"),
                    got: format!("dim {}", t.dim()),
                });
            }
        }
        let finite = self.z.all_finite()
            && self.m.all_finite()
            && self.kernel.log_signal_variance.is_finite()
            && self.kernel.log_lengthscales.iter().all(|v| v.is_finite())
            && self
                .l_s
                .iter()
                .all(|t| t.values().iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidConfig("non-finite expert parameter".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian marginals of q(f) at a batch of inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBatchPrediction {
    /// B x C means.
    pub mean: DenseMatrix,
    /// B x C variances, strictly positive.
    pub var: DenseMatrix,
}

impl GaussianBatchPrediction {
    pub fn batch_len(&self) -> usize {
        self.mean.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.mean.cols()
    }
}

/// Marginals of the variational predictive q(f) at `x_batch`:
/// per class, mean = A m_c and var_i = [A S_c A^T]_ii + sv2 - [A K_MB]_ii
/// with A = K_BM K_MM^{-1}, evaluated through Cholesky solves.
pub fn q_f_marginals(expert: &ExpertParams, x_batch: &DenseMatrix) -> Result<GaussianBatchPrediction> {
    let mats = kernel::gram(&expert.kernel, x_batch, &expert.z)?;
    let factor = cholesky_psd(&mats.k_mm, KMM_BASE_JITTER)?;
    let b = x_batch.rows();
    let c = expert.num_classes();

    // W = L^{-1} K_MB, so that  A = (L^{-T} W)^T  and
    // [K_BM K_MM^{-1} K_MB]_ii = |W col i|^2.
    let w = tri_solve(&factor, &mats.k_nm.transpose(), false)?;
    let nystrom = w.col_sq_norms();
    let t = tri_solve(&factor, &w, true)?;

    let mut mean = DenseMatrix::zeros(b, c);
    let mut var = DenseMatrix::zeros(b, c);
    for class in 0..c {
        let m_c = DenseMatrix::column(&expert.m.col_to_vec(class));
        let w_m = tri_solve(&factor, &m_c, false)?;
        let mean_c = w.matmul_tn(&w_m);
        let u = expert.l_s[class].to_lower().matmul_tn(&t);
        let s_var = u.col_sq_norms();
        for i in 0..b {
            mean.set(i, class, mean_c.get(i, 0));
            let v = s_var[i] + mats.k_nn_diag[i] - nystrom[i];
            var.set(i, class, v.max(expert.var_floor));
        }
    }
    Ok(GaussianBatchPrediction { mean, var })
}

/// KL[q(u) || p(u)] summed over classes, with p(u) = N(0, K_MM + jitter I):
/// sum_c 1/2 [tr(K^{-1} S_c) + m_c^T K^{-1} m_c - M + log det K - log det S_c].
pub fn kl_q_p(expert: &ExpertParams) -> Result<f64> {
    let k_mm = kernel::gram_sym(&expert.kernel, &expert.z);
    let factor = cholesky_psd(&k_mm, KMM_BASE_JITTER)?;
    let m = expert.num_inducing() as f64;
    let log_det_k = factor.log_det();
    let mut total = 0.0;
    for class in 0..expert.num_classes() {
        let l_c = expert.l_s[class].to_lower();
        let w_s = tri_solve(&factor, &l_c, false)?;
        let trace = w_s.frob_sq();
        let m_c = DenseMatrix::column(&expert.m.col_to_vec(class));
        let quad = tri_solve(&factor, &m_c, false)?.frob_sq();
        let log_det_s = 2.0 * (0..expert.num_inducing())
            .map(|i| l_c.get(i, i).ln())
            .sum::<f64>();
        total += 0.5 * (trace + quad - m + log_det_k - log_det_s);
    }
    Ok(total)
}

/// Closed-form E_q[log N(y_tilde | f, sigma2_tilde)] summed over the batch
/// and classes; no sampling is involved.
pub fn expected_log_lik(
    pred: &GaussianBatchPrediction,
    labels: &TransformedLabels,
) -> Result<f64> {
    if pred.mean.shape() != labels.y_tilde.shape() {
        return Err(Error::DimensionMismatch {
            context: "expected_log_lik".into(),
            expected: format!("{:?}", labels.y_tilde.shape()),
            got: format!("{:?}", pred.mean.shape()),
        });
    }
    Ok(gaussian_ell(
        pred.mean.data(),
        pred.var.data(),
        labels.y_tilde.data(),
        labels.sigma2_tilde.data(),
    ))
}

pub(crate) fn gaussian_ell(mean: &[f64], var: &[f64], y: &[f64], s2: &[f64]) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    let mut total = 0.0;
    for i in 0..mean.len() {
        let r = y[i] - mean[i];
        total += -0.5 * (LN_2PI + s2[i].ln()) - (r * r + var[i]) / (2.0 * s2[i]);
    }
    total
}

/// Minibatch evidence lower bound for one view.
pub fn elbo_view(
    expert: &ExpertParams,
    x_batch: &DenseMatrix,
    labels_batch: &TransformedLabels,
    scale: f64,
    beta: f64,
) -> Result<f64> {
    let pred = q_f_marginals(expert, x_batch)?;
    let ell = expected_log_lik(&pred, labels_batch)?;
    Ok(scale * ell - beta * kl_q_p(expert)?)
}
