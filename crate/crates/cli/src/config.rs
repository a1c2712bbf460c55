//! Run configuration: one JSON tree with defaults, a file overlay and dotted overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cftwin::cfgen::{GenConfig, Scenario};
use cftwin::compression::DistillConfig;
use cftwin::denoiser::DenoiserSpec;
use cftwin::evalkit::SsimWindow;
use cftwin::sampling::UpsampleMethod;
use cftwin::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Raised for anything wrong with the configuration itself.
#[derive(Debug, thiserror::Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Directory holding `train.cfds` and `test.cfds`.
    pub data_dir: Option<PathBuf>,
    /// Trained (teacher) checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Pruned student checkpoint to distill.
    pub student: Option<PathBuf>,
    /// Checkpoint to resume training from.
    pub resume: Option<PathBuf>,
    /// Directory of `sample` outputs to plot.
    pub samples_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Share of teacher parameters to remove.
    pub ratio: f64,
    /// Training pairs used to score layers.
    pub calibration_pairs: usize,
    /// Noise draws per calibration pair.
    pub draws_per_pair: usize,
    pub seed: u64,
    /// Also write the pairwise removal-distortion table.
    pub additivity: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { ratio: 0.35, calibration_pairs: 16, draws_per_pair: 2, seed: 0, additivity: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Number of test maps to reconstruct.
    pub count: usize,
    /// Reconstruction factor; defaults to the dataset's.
    pub factor: Option<usize>,
    pub upsample: UpsampleMethod,
    pub batch_size: usize,
    pub seed: u64,
    pub png: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { count: 4, factor: None, upsample: UpsampleMethod::Bicubic, batch_size: 8, seed: 0, png: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructorKind {
    #[default]
    Diffusion,
    Nearest,
    Bicubic,
    /// Returns the ground truth.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Factors to evaluate; those other than the training factor are zero-shot.
    pub factors: Vec<usize>,
    /// Number of test maps; all when unset.
    pub count: Option<usize>,
    pub reconstructor: ReconstructorKind,
    pub upsample: UpsampleMethod,
    pub batch_size: usize,
    pub seed: u64,
    pub ssim_window: SsimWindow,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            factors: vec![4],
            count: None,
            reconstructor: ReconstructorKind::Diffusion,
            upsample: UpsampleMethod::Bicubic,
            batch_size: 8,
            seed: 0,
            ssim_window: SsimWindow::Global,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Smallest panel side in pixels; maps are enlarged by whole factors.
    pub min_panel_px: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { min_panel_px: 128 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub data: GenConfig,
    pub model: DenoiserSpec,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub distill: DistillConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub plot: PlotConfig,
    pub inputs: Inputs,
}

impl RunConfig {
    /// Defaults, overlaid by the file at `path` (if any), then by `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| ConfigError(format!("cannot read {}", path.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("{} is not valid JSON: {e}", path.display())))?;
            merge(&mut tree, file, "")?;
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        Self::from_tree(tree)
    }

    fn from_tree(tree: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(tree)
            .map_err(|e| ConfigError(format!("at `{}`: {}", e.path(), e.inner())))?;
        Ok(cfg)
    }

    /// Canonical JSON (keys sorted) of the effective configuration.
    pub fn canonical_json(&self) -> Result<String> {
        // serde_json maps are ordered by key, so this is independent of input order.
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }
}

fn merge(base: &mut Value, overlay: Value, at: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => bail!(ConfigError(format!("unknown key `{path}`"))),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

/// Applies `dotted.key=value`; the value is read as JSON, falling back to a plain string.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!(ConfigError(format!("override `{spec}` is not of the form key=value"))))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| anyhow!(ConfigError(format!("unknown key `{key}`"))))?;
    }
    merge(node, value, key)
}
