//! Fusion of per-view Gaussian marginals into a single Gaussian.
//!
//! Each view's expert produces an independent diagonal Gaussian over the
//! per-class latent functions at the test points. A (weighted) product of
//! those densities is again Gaussian, with precisions adding up; the weight
//! of a view scales its precision. Weights come from the predictive entropy
//! per test point: views that are confident where the point lies contribute
//! more. With all weights 1 this reduces to the plain product of experts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::svgp::GaussianBatchPrediction;

/// Differential entropy of a 1-D Gaussian with unit variance:
/// 0.5 * ln(2 * pi * e).
const HALF_LN_2PI_E: f64 = 1.4189385332046727;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Every view gets weight 1 regardless of its predictions.
    Uniform,
    /// Per test point, w_v = V * softmax_v(-H_v / temperature) where H_v is
    /// the view's predictive entropy at that point. Weights stay positive
    /// and sum to the number of views; equal entropies give all 1.
    NegentropySoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewWeightPolicy {
    pub mode: WeightMode,
    pub temperature: f64,
}

impl Default for ViewWeightPolicy {
    fn default() -> Self {
        ViewWeightPolicy {
            mode: WeightMode::NegentropySoftmax,
            temperature: 1.0,
        }
    }
}

impl ViewWeightPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "weight temperature must be a positive real, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn uniform() -> Self {
        ViewWeightPolicy {
            mode: WeightMode::Uniform,
            temperature: 1.0,
        }
    }
}

/// Fused Gaussian marginals plus the per-point view weights that produced
/// them. `mean` and `var` are B x C; `weights` is B x V.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedPrediction {
    pub mean: DenseMatrix,
    pub var: DenseMatrix,
    pub weights: DenseMatrix,
}

/// Entropy of each row's diagonal Gaussian over the C latent class
/// functions: H_i = sum_c 0.5 * ln(2 pi e var_ic).
pub fn entropy_gaussian(pred: &GaussianBatchPrediction) -> Result<Vec<f64>> {
    let (b, c) = pred.var.shape();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut h = 0.0;
        for j in 0..c {
            let v = pred.var.get(i, j);
            if !(v > 0.0) {
                return Err(Error::NonPositiveVariance {
                    index: i * c + j,
                    value: v,
                });
            }
            h += HALF_LN_2PI_E + 0.5 * v.ln();
        }
        out.push(h);
    }
    Ok(out)
}

fn check_aligned(preds: &[GaussianBatchPrediction]) -> Result<(usize, usize)> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("no view predictions to fuse"));
    }
    let (b, c) = preds[0].mean.shape();
    if preds.iter().any(|p| p.mean.shape() != (b, c)) {
        return Err(Error::MismatchedBatch {
            sizes: preds.iter().map(|p| p.mean.rows()).collect(),
        });
    }
    Ok((b, c))
}

/// Per-point view weights under the given policy, as a B x V matrix.
pub fn compute_weights(
    preds: &[GaussianBatchPrediction],
    policy: &ViewWeightPolicy,
) -> Result<DenseMatrix> {
    policy.validate()?;
    let (b, _) = check_aligned(preds)?;
    let v = preds.len();
    match policy.mode {
        WeightMode::Uniform => {
            let mut w = DenseMatrix::zeros(b, v);
            w.data_mut().fill(1.0);
            Ok(w)
        }
        WeightMode::NegentropySoftmax => {
            let entropies: Vec<Vec<f64>> = preds
                .iter()
                .map(entropy_gaussian)
                .collect::<Result<_>>()?;
            let mut w = DenseMatrix::zeros(b, v);
            let mut logits = vec![0.0; v];
            for i in 0..b {
                for (k, h) in entropies.iter().enumerate() {
                    logits[k] = -h[i] / policy.temperature;
                }
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..v {
                    logits[k] = (logits[k] - top).exp();
                    total += logits[k];
                }
                for k in 0..v {
                    w.set(i, k, v as f64 * logits[k] / total);
                }
            }
            Ok(w)
        }
    }
}

/// Weighted product of the per-view Gaussians: per point and class,
/// precisions add as p = sum_v w_v / var_v, the fused variance is 1/p and
/// the fused mean is the precision-weighted mean combination.
pub fn aggregate(
    preds: &[GaussianBatchPrediction],
    weights: &DenseMatrix,
) -> Result<AggregatedPrediction> {
    let (b, c) = check_aligned(preds)?;
    let v = preds.len();
    if weights.shape() != (b, v) {
        return Err(Error::DimensionMismatch {
            context: "aggregate weights".into(),
            expected: format!("{b}x{v}"),
            got: format!("{}x{}", weights.rows(), weights.cols()),
        });
    }
    for (idx, &wv) in weights.data().iter().enumerate() {
        if !(wv > 0.0) {
            return Err(Error::NonPositiveWeight {
                index: idx,
                value: wv,
            });
        }
    }
    let mut mean = DenseMatrix::zeros(b, c);
    let mut var = DenseMatrix::zeros(b, c);
    for i in 0..b {
        for j in 0..c {
            let mut precision = 0.0;
            let mut weighted_mean = 0.0;
            for (k, p) in preds.iter().enumerate() {
                let pv = p.var.get(i, j);
                if !(pv > 0.0) {
                    return Err(Error::NonPositiveVariance {
                        index: i * c + j,
                        value: pv,
                    });
                }
                let wk = weights.get(i, k);
                precision += wk / pv;
                weighted_mean += wk * p.mean.get(i, j) / pv;
            }
            var.set(i, j, 1.0 / precision);
            mean.set(i, j, weighted_mean / precision);
        }
    }
    Ok(AggregatedPrediction {
        mean,
        var,
        weights: weights.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn pred(mean: Vec<f64>, var: Vec<f64>, b: usize, c: usize) -> GaussianBatchPrediction {
        GaussianBatchPrediction {
            mean: DenseMatrix::from_vec(b, c, mean).unwrap(),
            var: DenseMatrix::from_vec(b, c, var).unwrap(),
        }
    }

    fn random_preds(views: usize, b: usize, c: usize, seed: u64) -> Vec<GaussianBatchPrediction> {
        (0..views)
            .map(|k| {
                let s = RngStream::new(seed, k as u64);
                let mean = s.derive(0).std_normal(b * c);
                let var: Vec<f64> = s
                    .derive(1)
                    .std_normal(b * c)
                    .into_iter()
                    .map(|x| (0.7 * x).exp())
                    .collect();
                pred(mean, var, b, c)
            })
            .collect()
    }

    #[test]
    fn unit_variance_entropy() {
        let h = entropy_gaussian(&pred(vec![0.0], vec![1.0], 1, 1)).unwrap();
        assert!((h[0] - 1.4189385332046727).abs() < 1e-15);
        assert!((h[0] - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs()
            < 1e-15);
    }

    #[test]
    fn entropy_adds_over_classes() {
        let v = 0.37;
        let one = entropy_gaussian(&pred(vec![0.0], vec![v], 1, 1)).unwrap()[0];
        let two = entropy_gaussian(&pred(vec![0.0, 0.0], vec![v, v], 1, 2)).unwrap()[0];
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn entropy_shrinks_with_variance() {
        let mut last = f64::INFINITY;
        for v in [4.0, 1.0, 0.25, 0.01] {
            let h = entropy_gaussian(&pred(vec![0.0], vec![v], 1, 1)).unwrap()[0];
            assert!(h < last);
            last = h;
        }
    }

    #[test]
    fn entropy_rejects_nonpositive_variance() {
        let bad = entropy_gaussian(&pred(vec![0.0, 0.0], vec![1.0, 0.0], 1, 2));
        match bad {
            Err(Error::NonPositiveVariance { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonPositiveVariance, got {other:?}"),
        }
    }

    #[test]
    fn identical_views_get_unit_weights() {
        let p = pred(vec![0.3, -0.1], vec![0.5, 2.0], 1, 2);
        let w = compute_weights(
            &[p.clone(), p],
            &ViewWeightPolicy::default(),
        )
        .unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn confident_view_dominates() {
        let sharp = pred(vec![0.0], vec![0.01], 1, 1);
        let vague = pred(vec![0.0], vec![100.0], 1, 1);
        let w = compute_weights(&[sharp, vague], &ViewWeightPolicy::default()).unwrap();
        assert!(w.get(0, 0) > w.get(0, 1));
        assert!((w.get(0, 0) + w.get(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_view_softmax_by_hand() {
        // Entropies 0.5 ln(2 pi e) -/+ 1, so the logits are (1, -1) and the
        // weights are 2 * softmax(1, -1).
        let a = pred(vec![0.0], vec![(-2.0f64).exp()], 1, 1);
        let b = pred(vec![0.0], vec![2.0f64.exp()], 1, 1);
        let w = compute_weights(&[a, b], &ViewWeightPolicy::default()).unwrap();
        let e2 = std::f64::consts::E * std::f64::consts::E;
        let expect0 = 2.0 * e2 / (e2 + 1.0);
        let expect1 = 2.0 / (e2 + 1.0);
        assert!((w.get(0, 0) - expect0).abs() < 1e-12, "{}", w.get(0, 0));
        assert!((w.get(0, 1) - expect1).abs() < 1e-12, "{}", w.get(0, 1));
        assert!((w.get(0, 0) - 1.7616).abs() < 1e-4);
        assert!((w.get(0, 1) - 0.2384).abs() < 1e-4);
    }

    #[test]
    fn uniform_mode_is_all_ones() {
        let preds = random_preds(3, 4, 2, 9);
        let w = compute_weights(&preds, &ViewWeightPolicy::uniform()).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn equal_precision_fusion() {
        let a = pred(vec![1.0], vec![1.0], 1, 1);
        let b = pred(vec![3.0], vec![1.0], 1, 1);
        let w = DenseMatrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let agg = aggregate(&[a.clone(), a.clone()], &w).unwrap();
        assert!((agg.mean.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((agg.var.get(0, 0) - 0.5).abs() < 1e-15);
        let agg = aggregate(&[a, b], &w).unwrap();
        assert!((agg.mean.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((agg.var.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weighted_fusion_by_hand() {
        // Precision 2/1 + 1/1 = 3, mean (2*0 + 1*3)/3 = 1.
        let a = pred(vec![0.0], vec![1.0], 1, 1);
        let b = pred(vec![3.0], vec![1.0], 1, 1);
        let w = DenseMatrix::from_vec(1, 2, vec![2.0, 1.0]).unwrap();
        let agg = aggregate(&[a, b], &w).unwrap();
        assert!((agg.var.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((agg.mean.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_view_weight_scales_variance_only() {
        let a = pred(vec![0.7, -1.2], vec![0.9, 3.0], 1, 2);
        let w = DenseMatrix::from_vec(1, 1, vec![4.0]).unwrap();
        let agg = aggregate(&[a.clone()], &w).unwrap();
        for j in 0..2 {
            assert!((agg.mean.get(0, j) - a.mean.get(0, j)).abs() < 1e-15);
            assert!((agg.var.get(0, j) - a.var.get(0, j) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_nonpositive_weights() {
        let preds = random_preds(2, 2, 2, 10);
        let w = DenseMatrix::from_vec(2, 2, vec![1.0, 1.0, -0.5, 1.0]).unwrap();
        match aggregate(&preds, &w) {
            Err(Error::NonPositiveWeight { index, value }) => {
                assert_eq!(index, 2);
                assert_eq!(value, -0.5);
            }
            other => panic!("expected NonPositiveWeight, got {other:?}"),
        }
    }

    #[test]
    fn matches_plain_precision_space_product() {
        // Unweighted fusion cross-checked against a second implementation
        // that accumulates precisions view-major in one pass.
        let preds = random_preds(4, 5, 3, 11);
        let w = compute_weights(&preds, &ViewWeightPolicy::uniform()).unwrap();
        let agg = aggregate(&preds, &w).unwrap();
        let (b, c) = preds[0].mean.shape();
        let mut lam = DenseMatrix::zeros(b, c);
        let mut eta = DenseMatrix::zeros(b, c);
        for p in &preds {
            for i in 0..b {
                for j in 0..c {
                    lam.set(i, j, lam.get(i, j) + 1.0 / p.var.get(i, j));
                    eta.set(i, j, eta.get(i, j) + p.mean.get(i, j) / p.var.get(i, j));
                }
            }
        }
        for i in 0..b {
            for j in 0..c {
                let var = 1.0 / lam.get(i, j);
                let mean = eta.get(i, j) * var;
                assert!((agg.var.get(i, j) - var).abs() <= 1e-12 * var.abs());
                assert!((agg.mean.get(i, j) - mean).abs() <= 1e-12 * mean.abs().max(1.0));
            }
        }
    }

    #[test]
    fn fused_moments_are_bounded_by_experts() {
        let preds = random_preds(3, 8, 2, 12);
        let w = compute_weights(&preds, &ViewWeightPolicy::default()).unwrap();
        let agg = aggregate(&preds, &w).unwrap();
        let (b, c) = preds[0].mean.shape();
        for i in 0..b {
            for j in 0..c {
                let min_scaled = preds
                    .iter()
                    .enumerate()
                    .map(|(k, p)| p.var.get(i, j) / w.get(i, k))
                    .fold(f64::INFINITY, f64::min);
                assert!(agg.var.get(i, j) <= min_scaled * (1.0 + 1e-12));
                let lo = preds.iter().map(|p| p.mean.get(i, j)).fold(f64::INFINITY, f64::min);
                let hi = preds
                    .iter()
                    .map(|p| p.mean.get(i, j))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(agg.mean.get(i, j) >= lo - 1e-12 && agg.mean.get(i, j) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn view_order_does_not_matter() {
        let preds = random_preds(4, 6, 3, 13);
        let policy = ViewWeightPolicy::default();
        let base = aggregate(&preds, &compute_weights(&preds, &policy).unwrap()).unwrap();
        for order in [[2usize, 0, 3, 1], [3, 2, 1, 0], [1, 3, 0, 2]] {
            let shuffled: Vec<GaussianBatchPrediction> =
                order.iter().map(|&k| preds[k].clone()).collect();
            let agg =
                aggregate(&shuffled, &compute_weights(&shuffled, &policy).unwrap()).unwrap();
            assert!(agg.mean.max_abs_diff(&base.mean) < 1e-12);
            assert!(agg.var.max_abs_diff(&base.var) < 1e-12);
        }
    }

    #[test]
    fn temperature_must_be_positive() {
        let policy = ViewWeightPolicy {
            mode: WeightMode::NegentropySoftmax,
            temperature: 0.0,
        };
        assert!(matches!(
            compute_weights(&random_preds(2, 1, 1, 14), &policy),
            Err(Error::InvalidConfig(_))
        ));
    }
}
