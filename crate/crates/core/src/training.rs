//! AdamW training with early stopping and a seeded multi-run driver.

use crate::data::{make_windows, NormStats, Splits, WindowedSample};
use crate::error::{Error, Result};
use crate::evaluation::{mae, mse};
use crate::model::{build, ModelConfig, ModelParams};
use crate::nn::{Binder, Parameterized};
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::time::Instant;

fn default_lr() -> f64 {
    0.005
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_batch() -> usize {
    8
}
fn default_max_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    10
}
fn default_restore_best() -> bool {
    true
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Stop as soon as an epoch's mean training loss drops below this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_train_loss: Option<f64>,
    /// Return the best-validation parameters rather than the final ones.
    #[serde(default = "default_restore_best")]
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seeds: default_seeds(),
            target_train_loss: None,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if self.lr.is_nan()
            || self.lr <= 0.0
            || self.eps.is_nan()
            || self.eps <= 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::usage(
                "lr and eps must be positive, weight_decay nonnegative",
            ));
        }
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::usage("betas must lie in [0, 1)"));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::usage(
                "patience, batch_size and max_epochs must be >= 1",
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One AdamW update. Decay `p ← p·(1 − lr·wd)` is applied before the
/// bias-corrected adaptive step. `grads` follows `visit_params` order.
pub fn adamw_step(
    params: &mut dyn Parameterized,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != grads.len() {
        return Err(Error::usage(format!(
            "optimizer state holds {} tensors, got {} gradients",
            state.m.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let mut idx = 0;
    let mut mismatch = None;
    params.visit_params_mut(&mut |p| {
        let Some(g) = grads.get(idx) else {
            mismatch.get_or_insert(idx);
            return;
        };
        if g.numel() != p.numel() || state.m[idx].len() != p.numel() {
            mismatch.get_or_insert(idx);
            idx += 1;
            return;
        }
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *w *= decay;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
        idx += 1;
    });
    match mismatch {
        Some(i) => Err(Error::usage(format!(
            "gradient {i} does not match its parameter"
        ))),
        None if idx != grads.len() => Err(Error::usage(format!(
            "{} gradients for {idx} parameters",
            grads.len()
        ))),
        None => Ok(()),
    }
}

/// Normalized, windowed train/val/test samples.
#[derive(Debug, Clone)]
pub struct WindowedSplits {
    pub train: Vec<WindowedSample>,
    pub val: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
    pub norm: NormStats,
}

impl WindowedSplits {
    /// z-scores every split with the train statistics, then windows each split
    /// separately so no history crosses a split boundary.
    pub fn new(splits: &Splits, window: usize, horizon: usize) -> Result<Self> {
        let norm = splits
            .train
            .norm
            .unwrap_or_else(|| NormStats::from_values(splits.train.frames.data()));
        let prep = |ds: &crate::data::STDataset| {
            let mut ds = ds.clone();
            ds.norm = Some(norm);
            make_windows(&ds.normalized(), window, horizon)
        };
        Ok(Self {
            train: prep(&splits.train)?,
            val: prep(&splits.val)?,
            test: prep(&splits.test)?,
            norm,
        })
    }
}

fn stack(samples: &[&WindowedSample], pick: impl Fn(&WindowedSample) -> &Tensor) -> Result<Tensor> {
    let first = pick(samples[0]);
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(samples.len() * first.numel());
    for s in samples {
        let t = pick(s);
        if t.shape() != first.shape() {
            return Err(Error::dim(
                "batch",
                format!("sample shape {:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Stacked histories `[b, n, c, h, w]` and targets `[b, c_out, h, w]`.
pub fn collate(samples: &[&WindowedSample]) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    Ok((stack(samples, |s| &s.x)?, stack(samples, |s| &s.y)?))
}

/// Predictions `[s, c_out, h, w]` for `samples`, in order.
pub fn predict(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[WindowedSample],
    batch: usize,
) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::usage("nothing to predict"));
    }
    let mut out = Vec::new();
    let mut item_shape = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let (x, _) = collate(&refs)?;
        let y = crate::model::forward(params, cfg, &x)?;
        item_shape = y.shape()[1..].to_vec();
        out.extend_from_slice(y.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend(item_shape);
    Tensor::new(shape, out)
}

/// Stacked targets `[s, c_out, h, w]`.
pub fn targets(samples: &[WindowedSample]) -> Result<Tensor> {
    let refs: Vec<_> = samples.iter().collect();
    Ok(collate(&refs)?.1)
}

fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[WindowedSample],
    batch: usize,
) -> Result<(f64, f64)> {
    let pred = predict(params, cfg, samples, batch)?;
    let truth = targets(samples)?;
    Ok((mse(&pred, &truth)?, mae(&pred, &truth)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Outcome of one seeded training run; serialized one per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Model label such as `bidepth+csac`.
    pub model: String,
    pub depth: usize,
    pub best_val_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub epochs_run: usize,
    pub wall_clock_seconds: f64,
    pub param_count: usize,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub record: RunRecord,
    /// Best-validation parameters (initial parameters if no epoch finished).
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// Patience-based stopping on a validation metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    epochs_since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            epochs_since_best: 0,
        }
    }

    /// Records one evaluation. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        let improved = val < self.best;
        if improved {
            self.best = val;
            self.best_epoch = Some(epoch);
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        (improved, self.epochs_since_best >= self.patience)
    }
}

fn fit_batch(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    batch: &[&WindowedSample],
    state: &mut AdamState,
    train_cfg: &TrainConfig,
) -> Result<f64> {
    let (x, y) = collate(batch)?;
    let mut tape = Tape::new();
    let bound = params.bind(cfg, Binder::trainable(&mut tape))?;
    let xv = tape.constant(x);
    let pred = bound.forward(&mut tape, cfg, xv)?;
    let loss = tape.mse_loss(pred, &y)?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads: Vec<Tensor> = bound
        .params
        .iter()
        .map(|&p| tape.grad(p).unwrap_or_else(|| Tensor::zeros(tape.shape(p))))
        .collect();
    adamw_step(params, &grads, state, train_cfg)?;
    Ok(loss_value)
}

/// Trains one model initialized and shuffled from `seed`.
///
/// Configuration problems return `Err`; numeric divergence yields a record
/// with [`RunStatus::Failed`].
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &WindowedSplits,
    seed: u64,
) -> Result<TrainedRun> {
    train_cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::usage(
            "train, val and test splits must all hold samples",
        ));
    }
    let cfg = ModelConfig {
        seed,
        ..model_cfg.clone()
    };
    let started = Instant::now();
    let mut params = build(&cfg)?;
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(train_cfg.patience);
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::new();
    let mut failure = None;

    for epoch in 1..=train_cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut step_result = Ok(());
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &data.train[i]).collect();
            match fit_batch(&mut params, &cfg, &batch, &mut state, train_cfg) {
                Ok(l) => total += l * batch.len() as f64,
                Err(e) => {
                    step_result = Err(e);
                    break;
                }
            }
        }
        let epoch_result =
            step_result.and_then(|_| evaluate(&params, &cfg, &data.val, train_cfg.batch_size));
        let val = match epoch_result {
            Ok((v, _)) if v.is_finite() => v,
            Ok(_) => {
                failure = Some(Error::NonFinite {
                    op: "validation mse",
                });
                break;
            }
            Err(e @ Error::NonFinite { .. }) => {
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        let train_loss = total / data.train.len() as f64;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_mse: val,
        });
        let (improved, stop) = stopper.observe(epoch, val);
        if improved {
            best = params.clone();
        }
        if stop || train_cfg.target_train_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }

    if !train_cfg.restore_best && failure.is_none() {
        best = params;
    }
    let param_count = best.param_count();
    let mut record = RunRecord {
        seed,
        model: cfg.label(),
        depth: cfg.depth,
        best_val_mse: stopper.best_epoch.map(|_| stopper.best),
        test_mse: None,
        test_mae: None,
        epochs_run: history.len(),
        wall_clock_seconds: 0.0,
        param_count,
        status: RunStatus::Ok,
        error: None,
    };
    match failure {
        Some(e) => {
            record.status = RunStatus::Failed;
            record.error = Some(format!("diverged after {} epochs: {e}", history.len()));
        }
        None => {
            let (m, a) = evaluate(&best, &cfg, &data.test, train_cfg.batch_size)?;
            record.test_mse = Some(m);
            record.test_mae = Some(a);
        }
    }
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(TrainedRun {
        record,
        params: best,
        history,
    })
}

/// Sample mean and `n−1` standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub runs: usize,
    pub failed: usize,
    pub val_mse_mean: f64,
    pub val_mse_std: f64,
    pub test_mse_mean: f64,
    pub test_mse_std: f64,
    pub test_mae_mean: f64,
    pub test_mae_std: f64,
    pub train_seconds_mean: f64,
}

/// Aggregates records. Failed runs are an error unless `exclude_failed`.
pub fn summarize(records: &[RunRecord], exclude_failed: bool) -> Result<RunSummary> {
    let failed = records
        .iter()
        .filter(|r| r.status == RunStatus::Failed)
        .count();
    if failed > 0 && !exclude_failed {
        let seeds: Vec<_> = records
            .iter()
            .filter(|r| r.status == RunStatus::Failed)
            .map(|r| r.seed)
            .collect();
        return Err(Error::Runtime(format!("runs with seeds {seeds:?} failed")));
    }
    let ok: Vec<_> = records
        .iter()
        .filter(|r| r.status == RunStatus::Ok)
        .collect();
    if ok.is_empty() {
        return Err(Error::Runtime("no successful runs to summarize".into()));
    }
    let col = |f: fn(&RunRecord) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
    let (val_mse_mean, val_mse_std) = mean_std(&col(|r| r.best_val_mse));
    let (test_mse_mean, test_mse_std) = mean_std(&col(|r| r.test_mse));
    let (test_mae_mean, test_mae_std) = mean_std(&col(|r| r.test_mae));
    let (train_seconds_mean, _) = mean_std(&col(|r| Some(r.wall_clock_seconds)));
    Ok(RunSummary {
        runs: records.len(),
        failed,
        val_mse_mean,
        val_mse_std,
        test_mse_mean,
        test_mse_std,
        test_mae_mean,
        test_mae_std,
        train_seconds_mean,
    })
}

/// Worker cap from `BDMNN_THREADS`; `Some(0 | 1)` means run sequentially.
pub fn thread_limit() -> Option<usize> {
    std::env::var("BDMNN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
}

/// Maps `f` over `items`, in parallel unless `BDMNN_THREADS` forbids it.
/// Results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    match thread_limit() {
        Some(0 | 1) => items.iter().map(f).collect(),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(_) => items.iter().map(f).collect(),
        },
        None if rayon::current_num_threads() <= 1 => items.iter().map(f).collect(),
        None => items.par_iter().map(f).collect(),
    }
}

/// One independent run per seed in `train_cfg.seeds`.
pub fn multi_run(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &WindowedSplits,
) -> Result<Vec<TrainedRun>> {
    if train_cfg.seeds.len() < 2 {
        return Err(Error::usage("multi-run needs at least two seeds"));
    }
    par_map(&train_cfg.seeds, |&seed| {
        train(model_cfg, train_cfg, data, seed)
    })
    .into_iter()
    .collect()
}

pub fn write_records(records: &[RunRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<records>", e))?;
    }
    Ok(())
}

pub fn read_records(input: impl BufRead) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<records>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            lr,
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::default();
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &cfg(0.1, 0.0)).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut p = vec![Tensor::new(vec![2], vec![4.0, -1.0]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::default();
        let c = cfg(0.05, 0.1);
        for step in 1..=10 {
            adamw_step(&mut p, &g, &mut st, &c).unwrap();
            let f = (1.0 - 0.05 * 0.1f64).powi(step);
            assert!((p[0].data()[0] - 4.0 * f).abs() < 1e-14);
            assert!((p[0].data()[1] + f).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = vec![Tensor::scalar(0.0)];
        let g = vec![Tensor::scalar(0.3)];
        let mut st = AdamState::default();
        let c = cfg(0.01, 0.0);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0].data()[0];
            adamw_step(&mut p, &g, &mut st, &c).unwrap();
            last = before - p[0].data()[0];
        }
        assert!((last - 0.01).abs() < 1e-9, "step {last}");
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::default();
        assert!(adamw_step(&mut p, &[Tensor::zeros(&[3])], &mut st, &cfg(0.1, 0.0)).is_err());
    }

    #[test]
    fn patience_one_stops_on_first_regression() {
        let mut es = EarlyStopping::new(1);
        assert_eq!(es.observe(1, 0.5), (true, false));
        assert_eq!(es.observe(2, 0.6), (false, true));
        assert_eq!(es.best_epoch, Some(1));

        let mut es = EarlyStopping::new(3);
        let stops: Vec<bool> = [1.0, 0.9, 0.95, 0.91, 0.92]
            .iter()
            .enumerate()
            .map(|(e, &v)| es.observe(e, v).1)
            .collect();
        assert_eq!(stops, [false, false, false, false, true]);
        assert_eq!(es.best, 0.9);
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_std(&[2.0, 4.0, 6.0]), (4.0, 2.0));
        assert_eq!(mean_std(&[1.5; 4]), (1.5, 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            patience: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"max_epochs": 3}"#).unwrap();
        assert_eq!(parsed.lr, 0.005);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 3}"#).is_err());
    }
}
