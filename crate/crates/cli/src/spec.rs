//! JSON experiment specifications.

use anyhow::{Context, Result};
use bdmnn::data::{chrono_split, read_dataset_file, synth_generate, STDataset, SynthConfig};
use bdmnn::model::ModelConfig;
use bdmnn::training::{TrainConfig, WindowedSplits};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub config: SynthConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DataSource {
    Synth(SynthSource),
    /// Path to a `BDST` file, relative to the spec file.
    Dataset(PathBuf),
}

fn default_splits() -> (f64, f64, f64) {
    (0.85, 0.05, 0.10)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default = "default_splits")]
    pub splits: (f64, f64, f64),
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    /// Parses and validates; relative paths resolve against the spec's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading spec {}", path.display()))?;
        let mut spec: Self = serde_json::from_str(&text)
            .map_err(bdmnn::Error::from)
            .with_context(|| format!("invalid experiment spec {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Dataset(p) = &mut spec.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if spec.output_dir.is_relative() {
            spec.output_dir = base.join(&spec.output_dir);
        }
        spec.model.validate()?;
        spec.train.validate()?;
        Ok(spec)
    }

    pub fn dataset(&self) -> Result<STDataset> {
        Ok(match &self.data {
            DataSource::Synth(s) => synth_generate(&s.config, s.seed)?.0,
            DataSource::Dataset(p) => read_dataset_file(p)?,
        })
    }

    /// Loads, splits, normalizes and windows the data for `model`.
    pub fn prepare(&self, model: &ModelConfig) -> Result<(WindowedSplits, usize)> {
        let ds = self.dataset()?;
        let horizon = check_compat(model, &ds)?;
        let splits = chrono_split(&ds, self.splits, model.window + horizon)?;
        Ok((
            WindowedSplits::new(&splits, model.window, horizon)?,
            horizon,
        ))
    }
}

/// Checks the dataset's frame layout against the model and returns the
/// forecast horizon implied by `c_out`.
pub fn check_compat(model: &ModelConfig, ds: &STDataset) -> Result<usize> {
    let (c, h, w) = ds.frame_dims();
    if model.c_in != c || model.height != h || model.width != w {
        return Err(bdmnn::Error::Usage(format!(
            "model expects frames [{}, {}, {}], dataset has [{c}, {h}, {w}]",
            model.c_in, model.height, model.width
        ))
        .into());
    }
    if !model.c_out.is_multiple_of(c) {
        return Err(bdmnn::Error::Usage(format!(
            "c_out {} is not a multiple of the {c} input channels",
            model.c_out
        ))
        .into());
    }
    Ok(model.c_out / c)
}
