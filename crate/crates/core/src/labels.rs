//! Class labels as log-space regression targets.
//!
//! A label y_i becomes a row of per-class Dirichlet concentrations
//! alpha_{i,c} = 1 + alpha_eps for the labeled class and alpha_eps
//! otherwise. Matching the first two moments of each Gamma(alpha, 1)
//! marginal with a lognormal gives per-entry Gaussian targets
//!
//!   sigma2_tilde = log(1/alpha + 1)
//!   y_tilde      = log(alpha) - sigma2_tilde / 2
//!
//! so the per-view GPs can regress in log space with heteroscedastic noise.
//! alpha_eps > 0 keeps the cold-entry noise finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const DEFAULT_ALPHA_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformedLabels {
    /// N x C log-space targets.
    pub y_tilde: DenseMatrix,
    /// N x C log-space noise variances, strictly positive.
    pub sigma2_tilde: DenseMatrix,
    pub alpha_eps: f64,
    pub num_classes: usize,
}

impl TransformedLabels {
    pub fn len(&self) -> usize {
        self.y_tilde.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows selected by `indices`, for minibatches.
    pub fn gather(&self, indices: &[usize]) -> TransformedLabels {
        TransformedLabels {
            y_tilde: self.y_tilde.gather_rows(indices),
            sigma2_tilde: self.sigma2_tilde.gather_rows(indices),
            alpha_eps: self.alpha_eps,
            num_classes: self.num_classes,
        }
    }
}

/// Targets for a single concentration value.
pub(crate) fn moments_for_alpha(alpha: f64) -> (f64, f64) {
    let sigma2 = (1.0 / alpha + 1.0).ln();
    let y = alpha.ln() - 0.5 * sigma2;
    (y, sigma2)
}

pub fn transform_labels(
    labels: &[usize],
    num_classes: usize,
    alpha_eps: f64,
) -> Result<TransformedLabels> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if !(alpha_eps > 0.0) || !alpha_eps.is_finite() {
        return Err(Error::InvalidAlphaEps(alpha_eps));
    }
    let (y_cold, s2_cold) = moments_for_alpha(alpha_eps);
    let (y_hot, s2_hot) = moments_for_alpha(1.0 + alpha_eps);
    let n = labels.len();
    let mut y_tilde = DenseMatrix::zeros(n, num_classes);
    let mut sigma2_tilde = DenseMatrix::zeros(n, num_classes);
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: label as i64,
                num_classes,
                location: String::new(),
            });
        }
        let yr = y_tilde.row_mut(i);
        for v in yr.iter_mut() {
            *v = y_cold;
        }
        yr[label] = y_hot;
        let sr = sigma2_tilde.row_mut(i);
        for v in sr.iter_mut() {
            *v = s2_cold;
        }
        sr[label] = s2_hot;
    }
    Ok(TransformedLabels {
        y_tilde,
        sigma2_tilde,
        alpha_eps,
        num_classes,
    })
}
