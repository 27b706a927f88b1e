//! Synthetic two-scale fields: slow per-cell seasonality plus short,
//! spatially localized spikes and observation noise.

use super::STDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

fn default_interval() -> u32 {
    15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    #[serde(default = "default_interval")]
    pub interval_minutes: u32,
    /// Mean level shared by every cell.
    #[serde(default)]
    pub base_level: f64,
    /// Half-width of the uniform per-cell offset around `base_level`.
    #[serde(default)]
    pub base_spread: f64,
    #[serde(default)]
    pub seasonal_amplitude: f64,
    /// Seasonal period in frames.
    #[serde(default = "default_period")]
    pub period: f64,
    /// Expected number of spike onsets per frame.
    #[serde(default)]
    pub spike_rate: f64,
    #[serde(default)]
    pub spike_amplitude: f64,
    /// Gaussian bump width in cells.
    #[serde(default = "default_sigma")]
    pub spike_sigma: f64,
    #[serde(default = "default_min_duration")]
    pub spike_min_duration: usize,
    #[serde(default = "default_max_duration")]
    pub spike_max_duration: usize,
    #[serde(default)]
    pub noise_std: f64,
}

fn default_period() -> f64 {
    24.0
}

fn default_sigma() -> f64 {
    1.0
}

fn default_min_duration() -> usize {
    1
}

fn default_max_duration() -> usize {
    3
}

impl SynthConfig {
    /// Zero amplitudes everywhere: a constant field at `base_level`.
    pub fn constant(height: usize, width: usize, frames: usize, base_level: f64) -> Self {
        Self {
            height,
            width,
            frames,
            interval_minutes: default_interval(),
            base_level,
            base_spread: 0.0,
            seasonal_amplitude: 0.0,
            period: default_period(),
            spike_rate: 0.0,
            spike_amplitude: 0.0,
            spike_sigma: default_sigma(),
            spike_min_duration: default_min_duration(),
            spike_max_duration: default_max_duration(),
            noise_std: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::usage(
                "synthetic grid and frame count must be positive",
            ));
        }
        if self.period <= 0.0 || self.spike_sigma <= 0.0 {
            return Err(Error::usage("period and spike_sigma must be positive"));
        }
        if self.spike_min_duration == 0 || self.spike_min_duration > self.spike_max_duration {
            return Err(Error::usage("spike durations need 1 <= min <= max"));
        }
        if self.noise_std < 0.0 || self.spike_rate < 0.0 {
            return Err(Error::usage("noise_std and spike_rate must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spike {
    pub onset: usize,
    pub duration: usize,
    pub row: usize,
    pub col: usize,
    pub amplitude: f64,
}

impl Spike {
    pub fn is_active(&self, frame: usize) -> bool {
        frame >= self.onset && frame < self.onset + self.duration
    }
}

/// Ground-truth components of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthTruth {
    pub base: Vec<f64>,
    pub phases: Vec<f64>,
    pub spikes: Vec<Spike>,
    /// Bump support radius in cells; cells farther than this are untouched.
    pub spike_radius: usize,
}

// Independent random streams so toggling one component never shifts another.
const STREAM_BASE: u64 = 1;
const STREAM_PHASE: u64 = 2;
const STREAM_SPIKE: u64 = 3;
const STREAM_NOISE: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<(STDataset, SynthTruth)> {
    cfg.validate()?;
    let (h, w, t_len) = (cfg.height, cfg.width, cfg.frames);
    let cells = h * w;

    let mut rng = stream(seed, STREAM_BASE);
    let base: Vec<f64> = (0..cells)
        .map(|_| cfg.base_level + cfg.base_spread * rng.random_range(-1.0..=1.0))
        .collect();
    let mut rng = stream(seed, STREAM_PHASE);
    let phases: Vec<f64> = (0..cells).map(|_| rng.random_range(0.0..TAU)).collect();

    let mut frames = vec![0.0; t_len * cells];
    for (t, frame) in frames.chunks_exact_mut(cells).enumerate() {
        let angle = TAU * t as f64 / cfg.period;
        for (i, v) in frame.iter_mut().enumerate() {
            *v = base[i] + cfg.seasonal_amplitude * (angle + phases[i]).sin();
        }
    }

    let spike_radius = (3.0 * cfg.spike_sigma).ceil() as usize;
    let mut spikes = Vec::new();
    if cfg.spike_rate > 0.0 && cfg.spike_amplitude != 0.0 {
        let mut rng = stream(seed, STREAM_SPIKE);
        let count = Poisson::new(cfg.spike_rate * t_len as f64)
            .map_err(|e| Error::usage(format!("spike rate: {e}")))?
            .sample(&mut rng) as usize;
        for _ in 0..count {
            spikes.push(Spike {
                onset: rng.random_range(0..t_len),
                duration: rng.random_range(cfg.spike_min_duration..=cfg.spike_max_duration),
                row: rng.random_range(0..h),
                col: rng.random_range(0..w),
                amplitude: cfg.spike_amplitude * rng.random_range(0.5..1.5),
            });
        }
        let two_var = 2.0 * cfg.spike_sigma * cfg.spike_sigma;
        for s in &spikes {
            let (r0, r1) = (
                s.row.saturating_sub(spike_radius),
                (s.row + spike_radius).min(h - 1),
            );
            let (c0, c1) = (
                s.col.saturating_sub(spike_radius),
                (s.col + spike_radius).min(w - 1),
            );
            for t in s.onset..(s.onset + s.duration).min(t_len) {
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let d2 = (r.abs_diff(s.row).pow(2) + c.abs_diff(s.col).pow(2)) as f64;
                        frames[t * cells + r * w + c] += s.amplitude * (-d2 / two_var).exp();
                    }
                }
            }
        }
    }

    if cfg.noise_std > 0.0 {
        let mut rng = stream(seed, STREAM_NOISE);
        let normal =
            Normal::new(0.0, cfg.noise_std).map_err(|e| Error::usage(format!("noise: {e}")))?;
        for v in &mut frames {
            *v += normal.sample(&mut rng);
        }
    }

    let start = NaiveDate::from_ymd_opt(2021, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid epoch");
    let timestamps = (0..t_len)
        .map(|t| start + Duration::minutes(cfg.interval_minutes as i64 * t as i64))
        .collect();
    let ds = STDataset::new(
        Tensor::new(vec![t_len, 1, h, w], frames)?,
        timestamps,
        cfg.interval_minutes,
    )?;
    Ok((
        ds,
        SynthTruth {
            base,
            phases,
            spikes,
            spike_radius,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitudes_give_constant_field() {
        let (ds, _) = synth_generate(&SynthConfig::constant(4, 5, 10, 2.5), 1).unwrap();
        assert_eq!(ds.frames.shape(), &[10, 1, 4, 5]);
        assert!(ds.frames.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn same_seed_same_dataset() {
        let mut cfg = SynthConfig::constant(6, 6, 40, 0.0);
        cfg.seasonal_amplitude = 1.0;
        cfg.spike_rate = 0.3;
        cfg.spike_amplitude = 3.0;
        cfg.noise_std = 0.1;
        let a = synth_generate(&cfg, 9).unwrap();
        let b = synth_generate(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&cfg, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    /// Sample autocorrelation of `x` at `lag`.
    fn autocorr(x: &[f64], lag: usize) -> f64 {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let cov: f64 = (0..n - lag)
            .map(|i| (x[i] - mean) * (x[i + lag] - mean))
            .sum();
        cov / var
    }

    #[test]
    fn seasonal_autocorrelation_peaks_at_period() {
        let mut cfg = SynthConfig::constant(3, 3, 240, 1.0);
        cfg.seasonal_amplitude = 2.0;
        cfg.period = 24.0;
        let (ds, _) = synth_generate(&cfg, 4).unwrap();
        for cell in 0..9 {
            let series: Vec<f64> = (0..240).map(|t| ds.frames.data()[t * 9 + cell]).collect();
            let peak = (12..=36)
                .max_by(|&a, &b| autocorr(&series, a).total_cmp(&autocorr(&series, b)))
                .unwrap();
            assert_eq!(peak, 24, "cell {cell}");
        }
    }

    #[test]
    fn spikes_leave_untouched_cells_unchanged() {
        let mut cfg = SynthConfig::constant(12, 12, 60, 0.5);
        cfg.seasonal_amplitude = 1.0;
        cfg.noise_std = 0.2;
        let (quiet, _) = synth_generate(&cfg, 21).unwrap();
        cfg.spike_rate = 0.2;
        cfg.spike_amplitude = 4.0;
        let (spiky, truth) = synth_generate(&cfg, 21).unwrap();
        assert!(!truth.spikes.is_empty());
        let r = truth.spike_radius;
        let mut touched = 0;
        for t in 0..60 {
            for row in 0..12 {
                for col in 0..12 {
                    let covered = truth.spikes.iter().any(|s| {
                        s.is_active(t) && s.row.abs_diff(row) <= r && s.col.abs_diff(col) <= r
                    });
                    let idx = t * 144 + row * 12 + col;
                    if covered {
                        touched += 1;
                    } else {
                        assert_eq!(quiet.frames.data()[idx], spiky.frames.data()[idx]);
                    }
                }
            }
        }
        assert!(touched > 0);
    }
}
