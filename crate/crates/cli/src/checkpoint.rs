//! Trained-model snapshot: everything `eval`, `ood`, and the sweeps need
//! to reproduce predictions without retraining.

use std::fs;
use std::path::Path;

use mvgp::data::NormalizationStats;
use mvgp::svgp::ExpertParams;
use mvgp::trainer::TrainReport;
use mvgp::{Error, Result};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub num_classes: usize,
    pub alpha_eps: f64,
    /// Dataset view indices the experts were trained on, in expert order;
    /// evaluation subsets its dataset the same way.
    pub view_indices: Vec<usize>,
    /// Split coordinates: replaying them on the same dataset reproduces
    /// the exact train/test partition this model was fitted on.
    pub split_seed: u64,
    pub split_fraction: f64,
    /// Z-score statistics fitted on the training split of the used views.
    pub stats: NormalizationStats,
    pub experts: Vec<ExpertParams>,
    pub train_report: TrainReport,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.is_file() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "{}: unsupported checkpoint format {} (expected {})",
                path.display(),
                ck.format_version,
                FORMAT_VERSION
            )));
        }
        Ok(ck)
    }
}
