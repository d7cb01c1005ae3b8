//! Class-probability moments by Monte Carlo through the softmax.
//!
//! The fused Gaussian gives per-point, per-class latent marginals. Pushing
//! samples of those latents through a softmax produces draws of a class
//! probability vector; their first two sample moments are the quantities
//! reported everywhere downstream: the expected probabilities, their
//! variances, and the per-point uncertainty (summed variance over classes).
//! Every test point draws from its own derived stream, so results do not
//! depend on batch composition beyond the point's index, nor on threading.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngStream};
use crate::poe::{aggregate, compute_weights, AggregatedPrediction, ViewWeightPolicy};
use crate::svgp::{q_f_marginals, ExpertParams};

/// Monte-Carlo sample count used when nothing else is configured.
pub const DEFAULT_MC_SAMPLES: usize = 100;

/// First two moments of the class-probability vector per test point.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletMoments {
    /// B x C expected class probabilities; rows sum to 1 up to rounding.
    pub e_pi: DenseMatrix,
    /// B x C variances of the class probabilities, in [0, 1/4].
    pub v_pi: DenseMatrix,
    /// Per-point predictive uncertainty: the row sums of `v_pi`.
    pub uncertainty: Vec<f64>,
    pub mc_samples: usize,
}

impl DirichletMoments {
    pub fn batch_len(&self) -> usize {
        self.e_pi.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.e_pi.cols()
    }
}

/// Moments of softmax(latents) when the latents follow the fused Gaussian.
/// Point `i` draws `mc_samples` x C standard normals from `rng.derive(i)`,
/// sample-major, so a point's result depends only on its row and index.
pub fn dirichlet_moments(
    agg: &AggregatedPrediction,
    mc_samples: usize,
    rng: RngStream,
) -> Result<DirichletMoments> {
    if mc_samples == 0 {
        return Err(Error::InvalidConfig(
            "mc_samples must be at least 1".into(),
        ));
    }
    let (b, c) = agg.mean.shape();
    if agg.var.shape() != (b, c) {
        return Err(Error::DimensionMismatch {
            context: "dirichlet_moments".into(),
            expected: format!("{b}x{c} variances"),
            got: format!("{}x{}", agg.var.rows(), agg.var.cols()),
        });
    }
    for (idx, &v) in agg.var.data().iter().enumerate() {
        if !(v > 0.0) {
            return Err(Error::NonPositiveVariance { index: idx, value: v });
        }
    }

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|i| {
            let draws = rng.derive(i as u64).std_normal(mc_samples * c);
            let mean = agg.mean.row(i);
            let sd: Vec<f64> = agg.var.row(i).iter().map(|v| v.sqrt()).collect();
            let mut pis = vec![0.0; mc_samples * c];
            let mut logits = vec![0.0; c];
            for s in 0..mc_samples {
                for j in 0..c {
                    logits[j] = mean[j] + sd[j] * draws[s * c + j];
                }
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..c {
                    let e = (logits[j] - top).exp();
                    pis[s * c + j] = e;
                    total += e;
                }
                for j in 0..c {
                    pis[s * c + j] /= total;
                }
            }
            let inv_s = 1.0 / mc_samples as f64;
            let mut e_row = vec![0.0; c];
            for s in 0..mc_samples {
                for j in 0..c {
                    e_row[j] += pis[s * c + j];
                }
            }
            for v in e_row.iter_mut() {
                *v *= inv_s;
            }
            let mut v_row = vec![0.0; c];
            for s in 0..mc_samples {
                for j in 0..c {
                    let d = pis[s * c + j] - e_row[j];
                    v_row[j] += d * d;
                }
            }
            for v in v_row.iter_mut() {
                *v *= inv_s;
            }
            (e_row, v_row)
        })
        .collect();

    let mut e_pi = DenseMatrix::zeros(b, c);
    let mut v_pi = DenseMatrix::zeros(b, c);
    let mut uncertainty = Vec::with_capacity(b);
    for (i, (e_row, v_row)) in rows.into_iter().enumerate() {
        uncertainty.push(v_row.iter().sum());
        e_pi.row_mut(i).copy_from_slice(&e_row);
        v_pi.row_mut(i).copy_from_slice(&v_row);
    }
    Ok(DirichletMoments {
        e_pi,
        v_pi,
        uncertainty,
        mc_samples,
    })
}

/// Full prediction pipeline: per-view Gaussian marginals, entropy weights,
/// product-of-experts fusion, then Monte-Carlo softmax moments.
pub fn predict(
    experts: &[ExpertParams],
    x_star: &[DenseMatrix],
    policy: &ViewWeightPolicy,
    mc_samples: usize,
    rng: RngStream,
) -> Result<DirichletMoments> {
    if experts.is_empty() {
        return Err(Error::EmptyInput("no experts to predict with"));
    }
    if experts.len() != x_star.len() {
        return Err(Error::DimensionMismatch {
            context: "predict".into(),
            expected: format!("{} views", experts.len()),
            got: format!("{} views", x_star.len()),
        });
    }
    let b = x_star[0].rows();
    if x_star.iter().any(|x| x.rows() != b) {
        return Err(Error::MismatchedBatch {
            sizes: x_star.iter().map(DenseMatrix::rows).collect(),
        });
    }
    let preds: Vec<_> = experts
        .iter()
        .zip(x_star)
        .map(|(e, x)| q_f_marginals(e, x))
        .collect::<Result<_>>()?;
    let weights = compute_weights(&preds, policy)?;
    let agg = aggregate(&preds, &weights)?;
    dirichlet_moments(&agg, mc_samples, rng)
}

/// Hard labels: per row, the class with the highest expected probability;
/// exact ties go to the lowest class index.
pub fn classify(moments: &DirichletMoments) -> Vec<usize> {
    let (b, c) = moments.e_pi.shape();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let row = moments.e_pi.row(i);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}
