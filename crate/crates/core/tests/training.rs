use bdmnn::data::{
    chrono_split, make_windows, synth_generate, NormStats, SynthConfig, WindowedSample,
};
use bdmnn::evaluation::mse;
use bdmnn::model::{EncoderVariant, ModelConfig, TsEncoder};
use bdmnn::nn::Parameterized;
use bdmnn::tensor::Tensor;
use bdmnn::training::{
    multi_run, predict, read_records, summarize, targets, train, write_records, RunRecord,
    RunStatus, TrainConfig, WindowedSplits,
};

fn model(variant: EncoderVariant, ts: TsEncoder, hw: usize, n: usize) -> ModelConfig {
    ModelConfig {
        encoder_variant: variant,
        ts_encoder: ts,
        depth: 2,
        window: n,
        c_in: 1,
        c_h: 3,
        c_out: 1,
        height: hw,
        width: hw,
        kernel: 3,
        qkv_kernel: None,
        c_hid: None,
        attn_scale: false,
        seed: 0,
    }
}

fn seasonal(frames: usize, hw: usize, noise: f64) -> WindowedSplits {
    let mut c = SynthConfig::constant(hw, hw, frames, 0.0);
    c.seasonal_amplitude = 1.0;
    c.period = 12.0;
    c.noise_std = noise;
    let (ds, _) = synth_generate(&c, 3).unwrap();
    let s = chrono_split(&ds, (0.6, 0.2, 0.2), 5).unwrap();
    WindowedSplits::new(&s, 4, 1).unwrap()
}

fn tiny_set() -> WindowedSplits {
    let samples: Vec<WindowedSample> = (0..4)
        .map(|k| WindowedSample {
            x: Tensor::from_fn(&[3, 1, 4, 4], |i| ((i + 7 * k) as f64 * 0.9).sin()),
            y: Tensor::from_fn(&[1, 4, 4], |i| ((i + 3 * k) as f64 * 0.4).cos() * 0.5),
            target_index: 3 + k,
        })
        .collect();
    WindowedSplits {
        train: samples.clone(),
        val: samples.clone(),
        test: samples,
        norm: NormStats {
            mean: 0.0,
            std: 1.0,
        },
    }
}

/// Four consecutive windows of a z-scored seasonal field.
fn overfit_set() -> WindowedSplits {
    let mut c = SynthConfig::constant(6, 6, 40, 0.0);
    c.seasonal_amplitude = 1.0;
    c.period = 12.0;
    c.base_spread = 0.5;
    let (mut ds, _) = synth_generate(&c, 3).unwrap();
    ds.norm = Some(NormStats::from_values(ds.frames.data()));
    let samples: Vec<WindowedSample> = make_windows(&ds.normalized(), 4, 1)
        .unwrap()
        .into_iter()
        .take(4)
        .collect();
    WindowedSplits {
        train: samples.clone(),
        val: samples.clone(),
        test: samples,
        norm: ds.norm.unwrap(),
    }
}

#[test]
fn overfits_four_samples() {
    let data = overfit_set();
    let mut cfg = model(EncoderVariant::Bidepth, TsEncoder::Csac, 6, 4);
    cfg.c_h = 4;
    let tc = TrainConfig {
        batch_size: 4,
        max_epochs: 500,
        patience: 500,
        weight_decay: 0.0,
        target_train_loss: Some(1e-4),
        ..Default::default()
    };
    let run = train(&cfg, &tc, &data, 11).unwrap();
    let pred = predict(&run.params, &cfg, &data.train, 4).unwrap();
    let train_mse = mse(&pred, &targets(&data.train).unwrap()).unwrap();
    assert!(
        train_mse < 1e-3,
        "train mse {train_mse} after {} epochs",
        run.record.epochs_run
    );
}

#[test]
fn same_seed_same_trajectory() {
    let data = seasonal(40, 5, 0.05);
    let cfg = model(EncoderVariant::Deepshallow, TsEncoder::Convlstm, 5, 4);
    let tc = TrainConfig {
        max_epochs: 3,
        ..Default::default()
    };
    let a = train(&cfg, &tc, &data, 4).unwrap();
    let b = train(&cfg, &tc, &data, 4).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.record.test_mse, b.record.test_mse);
    assert_eq!(a.record.best_val_mse, b.record.best_val_mse);
    let c = train(&cfg, &tc, &data, 5).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn restored_parameters_achieve_best_validation() {
    let data = seasonal(50, 5, 0.3);
    let cfg = model(EncoderVariant::Bidepth, TsEncoder::Csac, 5, 4);
    let tc = TrainConfig {
        max_epochs: 12,
        patience: 2,
        lr: 0.05,
        ..Default::default()
    };
    let run = train(&cfg, &tc, &data, 2).unwrap();
    let best = run
        .history
        .iter()
        .map(|e| e.val_mse)
        .fold(f64::INFINITY, f64::min);
    let val = mse(
        &predict(&run.params, &cfg, &data.val, 8).unwrap(),
        &targets(&data.val).unwrap(),
    )
    .unwrap();
    assert_eq!(run.record.best_val_mse, Some(best));
    assert!((val - best).abs() < 1e-12, "{val} vs {best}");
    let best_epoch = run.history.iter().position(|e| e.val_mse == best).unwrap() + 1;
    assert!(run.record.epochs_run <= best_epoch + tc.patience);
}

#[test]
fn loss_trends_down_on_noiseless_seasonal_task() {
    let data = seasonal(60, 5, 0.0);
    let cfg = model(EncoderVariant::Bidepth, TsEncoder::Csac, 5, 4);
    let tc = TrainConfig {
        max_epochs: 15,
        patience: 15,
        lr: 0.003,
        ..Default::default()
    };
    let run = train(&cfg, &tc, &data, 1).unwrap();
    let losses: Vec<f64> = run.history.iter().map(|e| e.train_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] * 1.1, "loss jumped: {losses:?}");
    }
    assert!(losses.last() < losses.first());
}

#[test]
fn multi_run_records_round_trip_and_summarize() {
    let data = seasonal(40, 4, 0.1);
    let cfg = model(EncoderVariant::Shallowdeep, TsEncoder::Csac, 4, 4);
    let tc = TrainConfig {
        max_epochs: 2,
        seeds: vec![1, 2, 3, 4, 5],
        ..Default::default()
    };
    let runs = multi_run(&cfg, &tc, &data).unwrap();
    assert_eq!(runs.len(), 5);
    let records: Vec<RunRecord> = runs.into_iter().map(|r| r.record).collect();
    assert!(records
        .iter()
        .all(|r| r.status == RunStatus::Ok && r.param_count > 0));
    let mut buf = Vec::new();
    write_records(&records, &mut buf).unwrap();
    assert_eq!(read_records(buf.as_slice()).unwrap(), records);
    let s = summarize(&records, false).unwrap();
    assert_eq!(s.runs, 5);
    assert!(s.test_mse_std >= 0.0);

    let single = TrainConfig {
        seeds: vec![1],
        ..tc
    };
    assert!(multi_run(&cfg, &single, &data).is_err());
}

#[test]
fn summary_of_identical_runs_has_zero_spread() {
    let rec = |seed, v: f64| RunRecord {
        seed,
        model: "x".into(),
        depth: 1,
        best_val_mse: Some(v),
        test_mse: Some(v),
        test_mae: Some(v),
        epochs_run: 1,
        wall_clock_seconds: 1.0,
        param_count: 1,
        status: RunStatus::Ok,
        error: None,
    };
    let s = summarize(&[rec(1, 0.3), rec(2, 0.3), rec(3, 0.3)], false).unwrap();
    assert_eq!((s.test_mse_mean, s.test_mse_std), (0.3, 0.0));
    let s = summarize(&[rec(1, 2.0), rec(2, 4.0), rec(3, 6.0)], false).unwrap();
    assert_eq!((s.val_mse_mean, s.val_mse_std), (4.0, 2.0));

    let mut failed = rec(4, 0.0);
    failed.status = RunStatus::Failed;
    failed.test_mse = None;
    let recs = [rec(1, 2.0), failed];
    assert!(summarize(&recs, false).is_err());
    assert_eq!(summarize(&recs, true).unwrap().failed, 1);
}

#[test]
fn divergence_is_recorded_as_failure() {
    let mut data = tiny_set();
    for s in &mut data.train {
        s.y = Tensor::filled(&[1, 4, 4], 1e160);
    }
    let cfg = model(EncoderVariant::None, TsEncoder::Csac, 4, 3);
    let tc = TrainConfig {
        max_epochs: 3,
        ..Default::default()
    };
    let run = train(&cfg, &tc, &data, 1).unwrap();
    assert_eq!(run.record.status, RunStatus::Failed);
    assert!(run.record.error.as_deref().unwrap().contains("diverged"));
    assert!(run.params.param_count() > 0);
}

#[test]
fn final_parameters_kept_when_not_restoring() {
    let data = seasonal(50, 5, 0.3);
    let cfg = model(EncoderVariant::Bidepth, TsEncoder::Csac, 5, 4);
    let tc = TrainConfig {
        max_epochs: 6,
        patience: 6,
        lr: 0.05,
        restore_best: false,
        ..Default::default()
    };
    let run = train(&cfg, &tc, &data, 2).unwrap();
    let val = mse(
        &predict(&run.params, &cfg, &data.val, 8).unwrap(),
        &targets(&data.val).unwrap(),
    )
    .unwrap();
    assert!((val - run.history.last().unwrap().val_mse).abs() < 1e-12);
}
