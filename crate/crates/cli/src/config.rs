//! Resolved run configuration and its content hash.
//!
//! Every command materializes the settings it actually ran with into an
//! [`ExperimentConfig`] and stamps outputs with a SHA-256 over its canonical
//! JSON form. Canonicalization goes through `serde_json::Value`, whose
//! object keys are sorted, so the hash depends on field values only, never
//! on declaration or serialization order.

use std::path::PathBuf;

use mvgp::data::{MoonsSpec, NoiseSpec};
use mvgp::poe::ViewWeightPolicy;
use mvgp::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<MoonsSpec>,
    /// Dataset view indices used, in expert order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_inducing: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag_cov: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighting: Option<ViewWeightPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece_bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_max_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_param: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let value = serde_json::to_value(cfg).expect("config serializes");
    let canonical = serde_json::to_string(&value).expect("json value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
