//! Error metrics, spatial heatmaps, depth sweeps, ablations and
//! bootstrap significance.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;
use crate::training::{multi_run, summarize, RunRecord, RunSummary, TrainConfig, WindowedSplits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

fn check_pair(op: &'static str, pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        ));
    }
    if pred.ndim() < 3 {
        return Err(Error::dim(
            op,
            format!("expected [s, h, w] or [s, c, h, w], got {:?}", pred.shape()),
        ));
    }
    Ok(())
}

/// Mean over samples (and channels) of the per-frame spatial mean squared error.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair("mse", pred, truth)?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Mean absolute error with the same averaging as [`mse`].
pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair("mae", pred, truth)?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    /// `[h][w]` mean absolute error over samples and channels.
    pub per_cell_mae: Vec<Vec<f64>>,
}

pub fn metric_report(pred: &Tensor, truth: &Tensor) -> Result<MetricReport> {
    check_pair("metric report", pred, truth)?;
    let s = pred.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let cells = h * w;
    let frames = pred.numel() / cells;
    let mut grid = vec![0.0; cells];
    for (i, (p, t)) in pred.data().iter().zip(truth.data()).enumerate() {
        grid[i % cells] += (p - t).abs();
    }
    Ok(MetricReport {
        mse: mse(pred, truth)?,
        mae: mae(pred, truth)?,
        per_cell_mae: grid
            .chunks(w)
            .map(|row| row.iter().map(|v| v / frames as f64).collect())
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "pgm" => Ok(Self::Pgm),
            other => Err(Error::usage(format!(
                "unknown heatmap format `{other}` (csv, pgm)"
            ))),
        }
    }
}

fn check_grid(grid: &[Vec<f64>]) -> Result<usize> {
    let w = grid.first().map_or(0, Vec::len);
    if w == 0 || grid.iter().any(|r| r.len() != w) {
        return Err(Error::usage(
            "heatmap grid must be non-empty and rectangular",
        ));
    }
    Ok(w)
}

pub fn heatmap_csv(grid: &[Vec<f64>]) -> Result<String> {
    check_grid(grid)?;
    let mut out = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Plain-text `P2` graymap, min–max scaled to `0..=255`. A constant grid maps
/// to all zeros.
pub fn heatmap_pgm(grid: &[Vec<f64>]) -> Result<String> {
    let w = check_grid(grid)?;
    let lo = grid.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = grid
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P2\n{w} {}\n255\n", grid.len());
    for row in grid {
        let grays: Vec<String> = row
            .iter()
            .map(|v| {
                let g = if range > 0.0 {
                    ((v - lo) / range * 255.0).round()
                } else {
                    0.0
                };
                (g as u8).to_string()
            })
            .collect();
        out.push_str(&grays.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_heatmap_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|v| {
                    v.trim().parse().map_err(|_| Error::Parse {
                        line: i as u64 + 1,
                        message: format!("bad heatmap value {v:?}"),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn export_heatmap(grid: &[Vec<f64>], path: &Path, format: HeatmapFormat) -> Result<()> {
    let text = match format {
        HeatmapFormat::Csv => heatmap_csv(grid)?,
        HeatmapFormat::Pgm => heatmap_pgm(grid)?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fraction of index-paired runs where `a` is strictly lower; ties earn half.
pub fn win_rate(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::usage(format!(
            "win rate needs equal non-empty lists, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let credit: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Less) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum();
    Ok(credit / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignificanceReport {
    /// `mean(b) − mean(a)`; positive when `a` has the lower error.
    pub observed_mean_reduction: f64,
    /// One-sided: share of null resamples with a reduction at least as large.
    pub p_value: f64,
    /// Share of null resamples with `|reduction| ≥ |observed|`.
    pub p_value_two_sided: f64,
    pub n_boot: usize,
    /// Whether `(k + 1) / (n_boot + 1)` smoothing was applied.
    pub add_one: bool,
    /// Present when the lists are index-paired (equal length).
    pub win_rate: Option<f64>,
    /// Set when either list has a single element.
    pub wide_uncertainty: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean-centered two-sample bootstrap of `mean(b) − mean(a)` under the null of
/// equal means: each group is shifted to the pooled mean, then both are
/// resampled with replacement `n_boot` times.
pub fn bootstrap_test(
    a: &[f64],
    b: &[f64],
    n_boot: usize,
    seed: u64,
    add_one: bool,
) -> Result<SignificanceReport> {
    if n_boot < 100 {
        return Err(Error::usage(format!("n_boot must be >= 100, got {n_boot}")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::usage("bootstrap needs two non-empty lists"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::usage("bootstrap inputs must be finite"));
    }
    let observed = mean(b) - mean(a);
    let pooled = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64;
    let (ma, mb) = (mean(a), mean(b));
    let a0: Vec<f64> = a.iter().map(|v| v - ma + pooled).collect();
    let b0: Vec<f64> = b.iter().map(|v| v - mb + pooled).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resample_mean = |xs: &[f64], rng: &mut ChaCha8Rng| {
        (0..xs.len())
            .map(|_| xs[rng.random_range(0..xs.len())])
            .sum::<f64>()
            / xs.len() as f64
    };
    // Slack absorbs the rounding left over from centering.
    let tol = 1e-12 * (1.0 + observed.abs());
    let (mut upper, mut both) = (0usize, 0usize);
    for _ in 0..n_boot {
        let d = resample_mean(&b0, &mut rng) - resample_mean(&a0, &mut rng);
        if d >= observed - tol {
            upper += 1;
        }
        if d.abs() >= observed.abs() - tol {
            both += 1;
        }
    }
    let p = |k: usize| {
        if add_one {
            (k + 1) as f64 / (n_boot + 1) as f64
        } else {
            k as f64 / n_boot as f64
        }
    };
    Ok(SignificanceReport {
        observed_mean_reduction: observed,
        p_value: p(upper),
        p_value_two_sided: p(both),
        n_boot,
        add_one,
        win_rate: if a.len() == b.len() {
            Some(win_rate(a, b)?)
        } else {
            None
        },
        wide_uncertainty: a.len() < 2 || b.len() < 2,
    })
}

/// `(base − variant) / base × 100`.
pub fn improvement_percent(base: f64, variant: f64) -> f64 {
    (base - variant) / base * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub depth: usize,
    pub val_mse_mean: f64,
    pub val_mse_std: f64,
    pub train_seconds_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub records: Vec<RunRecord>,
    /// Soft-check notes, e.g. training time falling as depth grows.
    pub warnings: Vec<String>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("L,val_mse_mean,val_mse_std,train_seconds_mean\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.depth, r.val_mse_mean, r.val_mse_std, r.train_seconds_mean
            );
        }
        out
    }
}

/// One multi-run per depth, holding everything else in `template` fixed.
pub fn depth_sweep(
    template: &ModelConfig,
    depths: &[usize],
    train_cfg: &TrainConfig,
    data: &WindowedSplits,
) -> Result<SweepTable> {
    if depths.is_empty() || depths.contains(&0) {
        return Err(Error::usage(
            "sweep depths must be a non-empty list of values >= 1",
        ));
    }
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for &depth in depths {
        let cfg = ModelConfig {
            depth,
            ..template.clone()
        };
        let recs: Vec<RunRecord> = multi_run(&cfg, train_cfg, data)?
            .into_iter()
            .map(|r| r.record)
            .collect();
        let s = summarize(&recs, false)?;
        if let Some(prev) = rows.last() {
            if depth > prev.depth && s.train_seconds_mean < prev.train_seconds_mean {
                warnings.push(format!(
                    "training time fell from {:.3}s at L={} to {:.3}s at L={depth}",
                    prev.train_seconds_mean, prev.depth, s.train_seconds_mean
                ));
            }
        }
        rows.push(SweepRow {
            depth,
            val_mse_mean: s.val_mse_mean,
            val_mse_std: s.val_mse_std,
            train_seconds_mean: s.train_seconds_mean,
        });
        records.extend(recs);
    }
    Ok(SweepTable {
        rows,
        records,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub param_count: usize,
    pub summary: RunSummary,
    /// Test-MSE improvement over the first row, in percent.
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Records per row, in seed order.
    pub records: Vec<Vec<RunRecord>>,
}

/// Runs every configuration on the same seeds; the first is the baseline.
pub fn ablation(
    configs: &[ModelConfig],
    train_cfg: &TrainConfig,
    data: &WindowedSplits,
) -> Result<AblationTable> {
    if configs.is_empty() {
        return Err(Error::usage("ablation needs at least one configuration"));
    }
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for cfg in configs {
        let recs: Vec<RunRecord> = multi_run(cfg, train_cfg, data)?
            .into_iter()
            .map(|r| r.record)
            .collect();
        let summary = summarize(&recs, false)?;
        let base = rows
            .first()
            .map_or(summary.test_mse_mean, |r: &AblationRow| {
                r.summary.test_mse_mean
            });
        rows.push(AblationRow {
            label: cfg.label(),
            param_count: recs[0].param_count,
            improvement: improvement_percent(base, summary.test_mse_mean),
            summary,
        });
        records.push(recs);
    }
    Ok(AblationTable { rows, records })
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| model | params | test MSE | test MAE | improvement |\n|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:+.2}% |",
                r.label,
                r.param_count,
                s.test_mse_mean,
                s.test_mse_std,
                s.test_mae_mean,
                s.test_mae_std,
                r.improvement
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("model,param_count,test_mse_mean,test_mse_std,test_mae_mean,test_mae_std,improvement_percent\n");
        for r in &self.rows {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.2}",
                r.label,
                r.param_count,
                s.test_mse_mean,
                s.test_mse_std,
                s.test_mae_mean,
                s.test_mae_std,
                r.improvement
            );
        }
        out
    }
}

/// Test MSEs of `records` in seed order; failed runs are an error.
pub fn test_mses(records: &[RunRecord]) -> Result<Vec<f64>> {
    let mut sorted: Vec<_> = records.iter().collect();
    sorted.sort_by_key(|r| r.seed);
    sorted
        .iter()
        .map(|r| {
            r.test_mse
                .ok_or_else(|| Error::Runtime(format!("run with seed {} has no test MSE", r.seed)))
        })
        .collect()
}
