//! Result records, the output manifest, and small file helpers.

use std::fs;
use std::path::Path;
use std::time::Instant;

use mvgp::{Error, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Metrics of one seed's run within a sweep cell.
#[derive(Debug, Clone, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub ece: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// One experiment cell aggregated across seeds. Standard deviations use
/// the population convention (one seed gives 0).
#[derive(Debug, Clone, Serialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub config_hash: String,
    pub per_seed: Vec<SeedMetrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_ece: f64,
    pub std_ece: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_auroc: Option<f64>,
}

impl ResultRecord {
    pub fn from_seeds(experiment: String, config_hash: String, per_seed: Vec<SeedMetrics>) -> Self {
        let accs: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();
        let eces: Vec<f64> = per_seed.iter().map(|s| s.ece).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        let (mean_ece, std_ece) = mean_std(&eces);
        let aurocs: Vec<f64> = per_seed.iter().filter_map(|s| s.auroc).collect();
        let mean_auroc = if aurocs.is_empty() {
            None
        } else {
            Some(mean_std(&aurocs).0)
        };
        ResultRecord {
            experiment,
            config_hash,
            per_seed,
            mean_accuracy,
            std_accuracy,
            mean_ece,
            std_ece,
            mean_auroc,
        }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "mean_std of an empty slice");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    config: &'a ExperimentConfig,
    /// File names under the output directory, in creation order.
    outputs: &'a [String],
    total_seconds: f64,
}

/// Write `manifest.json` indexing everything a command produced.
pub fn write_manifest(
    out_dir: &Path,
    cfg: &ExperimentConfig,
    hash: &str,
    outputs: &[String],
    started: Instant,
) -> Result<()> {
    let manifest = Manifest {
        command: &cfg.command,
        config_hash: hash,
        config: cfg,
        outputs,
        total_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
