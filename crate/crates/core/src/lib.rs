//! Multi-view Gaussian process classification.
//!
//! One sparse variational GP expert is trained per view on log-space
//! regression targets derived from the class labels; at inference time the
//! per-view predictive Gaussians are fused by an entropy-weighted product
//! of experts and class probabilities are recovered by Monte-Carlo softmax
//! sampling, which also yields a per-sample uncertainty score.
//!
//! Module map:
//! - [`numerics`]: dense matrices, Cholesky with jitter, seeded RNG streams
//! - [`labels`]: one-hot labels -> heteroscedastic regression targets
//! - [`kernel`]: ARD RBF covariance and Gram assembly
//! - [`svgp`]: per-view expert parameters, variational marginals, KL, ELBO
//! - [`trainer`]: reverse-mode gradients and Adam training loop
//! - [`poe`]: entropy-weighted product-of-experts fusion
//! - [`predictor`]: Monte-Carlo class-probability moments and uncertainty
//! - [`metrics`]: accuracy, calibration error, AUROC
//! - [`data`]: multi-view datasets, synthetic moons, noise protocol
//! - [`checkpoint`]: JSON serialization of trained models

pub mod data;
pub mod error;
pub mod kernel;
pub mod labels;
pub mod metrics;
pub mod numerics;
pub mod poe;
pub mod predictor;
pub mod svgp;
pub mod trainer;

pub use error::{Error, Result};
