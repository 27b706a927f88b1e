//! Spatio-temporal datasets: synthetic generation, trip ingestion,
//! chronological splitting, windowing and the `BDST` container.

mod format;
mod ingest;
mod split;
mod synth;

pub use format::{
    read_dataset, read_dataset_file, write_dataset, write_dataset_file, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use ingest::{
    ingest_trips, pixelation_error, read_mapping, read_trips, read_zone_areas, FrameLayout,
    GridMapping, IngestConfig, IngestReport, PixelationReport, TripRecord,
};
pub use split::{chrono_split, make_windows, Splits, WindowedSample};
pub use synth::{synth_generate, Spike, SynthConfig, SynthTruth};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

/// z-score statistics taken from a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Population mean and standard deviation; a degenerate spread falls back to 1.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }
}

/// Time-ordered frames `[T, c, h, w]` with one timestamp per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct STDataset {
    pub frames: Tensor,
    pub timestamps: Vec<NaiveDateTime>,
    /// Nominal spacing between consecutive frames.
    pub interval_minutes: u32,
    pub norm: Option<NormStats>,
}

impl STDataset {
    pub fn new(
        frames: Tensor,
        timestamps: Vec<NaiveDateTime>,
        interval_minutes: u32,
    ) -> Result<Self> {
        if frames.ndim() != 4 {
            return Err(Error::dim(
                "dataset",
                format!("frames must be [T,c,h,w], got {:?}", frames.shape()),
            ));
        }
        if timestamps.len() != frames.shape()[0] {
            return Err(Error::dim(
                "dataset",
                format!(
                    "{} timestamps for {} frames",
                    timestamps.len(),
                    frames.shape()[0]
                ),
            ));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::usage(
                "dataset timestamps must be strictly increasing",
            ));
        }
        Ok(Self {
            frames,
            timestamps,
            interval_minutes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(c, h, w)` of a single frame.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    /// Contiguous frame range `start..start + len` sharing this dataset's stats.
    pub fn range(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            frames: self.frames.slice_axis(0, start, len)?,
            timestamps: self.timestamps[start..start + len].to_vec(),
            interval_minutes: self.interval_minutes,
            norm: self.norm,
        })
    }

    /// Frames mapped through the stored z-score (identity if no stats are set).
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        if let Some(NormStats { mean, std }) = self.norm {
            for v in out.frames.data_mut() {
                *v = (*v - mean) / std;
            }
        }
        out
    }
}

pub(crate) const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
