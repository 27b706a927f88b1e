use crate::spec::{check_compat, ExperimentSpec};
use anyhow::{Context, Result};
use bdmnn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use bdmnn::data::{
    chrono_split, ingest_trips, make_windows, pixelation_error, read_dataset_file, read_mapping,
    read_trips, read_zone_areas, synth_generate, write_dataset_file, FrameLayout, IngestConfig,
    SynthConfig,
};
use bdmnn::evaluation::{
    ablation, bootstrap_test, depth_sweep, export_heatmap, metric_report, test_mses, HeatmapFormat,
};
use bdmnn::model::{
    grad_check_model, kernel_for_budget, param_count_formula, EncoderVariant, ModelConfig,
    TsEncoder,
};
use bdmnn::training::{
    multi_run, predict, read_records, summarize, targets, train as train_one, write_records,
    RunRecord, TrainedRun,
};
use chrono::{NaiveDate, NaiveTime};
use serde::Serialize;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

/// A command-line mistake that maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Flags that override fields of an experiment spec.
#[derive(clap::Args, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

fn load_spec(path: &Path, o: &Overrides) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(path)?;
    if let Some(dir) = &o.output_dir {
        spec.output_dir = dir.clone();
    }
    if let Some(seeds) = &o.seeds {
        spec.train.seeds = seeds.clone();
    }
    if let Some(e) = o.max_epochs {
        spec.train.max_epochs = e;
    }
    if spec.train.seeds.is_empty() {
        return Err(usage("at least one seed is required"));
    }
    std::fs::create_dir_all(&spec.output_dir)
        .with_context(|| format!("creating output directory {}", spec.output_dir.display()))?;
    Ok(spec)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_runs(path: &Path, records: &[RunRecord]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    write_records(records, std::io::BufWriter::new(file))?;
    Ok(())
}

pub fn synth(config: &Path, seed: u64, out: &Path) -> Result<()> {
    let text =
        std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: SynthConfig = serde_json::from_str(&text)
        .map_err(bdmnn::Error::from)
        .with_context(|| format!("invalid generator config {}", config.display()))?;
    let (ds, truth) = synth_generate(&cfg, seed)?;
    write_dataset_file(&ds, out)?;
    eprintln!(
        "wrote {} frames of {}x{} with {} spikes to {}",
        ds.len(),
        cfg.height,
        cfg.width,
        truth.spikes.len(),
        out.display()
    );
    Ok(())
}

pub struct IngestArgs {
    pub trips: PathBuf,
    pub mapping: PathBuf,
    pub zones: PathBuf,
    pub out: PathBuf,
    pub first_day: String,
    pub days: usize,
    pub start: String,
    pub end: String,
    pub interval: u32,
    pub layout: String,
    pub report: Option<PathBuf>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn parse_time(s: &str) -> Result<NaiveTime> {
    NaiveTime::parse_from_str(s, "%H:%M")
        .map_err(|_| usage(format!("bad time {s:?}, expected HH:MM")))
}

#[derive(Serialize)]
struct IngestSummary<'a> {
    frames: usize,
    shape: &'a [usize],
    accepted_records: usize,
    accepted_passengers: u64,
    unknown_zone_records: usize,
    outside_window_records: usize,
    pixelation: bdmnn::data::PixelationReport,
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let layout = match a.layout.as_str() {
        "time" => FrameLayout::Time,
        "channels" => FrameLayout::Channels,
        other => return Err(usage(format!("unknown layout `{other}` (time, channels)"))),
    };
    let cfg = IngestConfig {
        first_day: NaiveDate::parse_from_str(&a.first_day, "%Y-%m-%d").map_err(|_| {
            usage(format!(
                "bad first day {:?}, expected YYYY-MM-DD",
                a.first_day
            ))
        })?,
        days: a.days,
        period_start: parse_time(&a.start)?,
        period_end: parse_time(&a.end)?,
        interval_minutes: a.interval,
        layout,
    };
    let trips = read_trips(open(&a.trips)?).with_context(|| format!("in {}", a.trips.display()))?;
    let mapping =
        read_mapping(open(&a.mapping)?).with_context(|| format!("in {}", a.mapping.display()))?;
    let areas =
        read_zone_areas(open(&a.zones)?).with_context(|| format!("in {}", a.zones.display()))?;
    let rep = ingest_trips(trips, &mapping, &cfg)?;
    // Zones with area but no mapped cells carry no demand of their own.
    let weights = areas
        .keys()
        .map(|z| (*z, rep.zone_demand.get(z).copied().unwrap_or(0.0)))
        .collect();
    let pixelation = pixelation_error(&mapping, &areas, &weights)?;
    write_dataset_file(&rep.dataset, &a.out)?;
    let report_path = a.report.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".pixelation.json");
        p.into()
    });
    let summary = IngestSummary {
        frames: rep.dataset.len(),
        shape: rep.dataset.frames.shape(),
        accepted_records: rep.accepted,
        accepted_passengers: rep.accepted_passengers,
        unknown_zone_records: rep.unknown_zone,
        outside_window_records: rep.outside_window,
        pixelation,
    };
    write_json(&report_path, &summary)?;
    if rep.unknown_zone > 0 {
        eprintln!("skipped {} records with unmapped zones", rep.unknown_zone);
    }
    eprintln!(
        "wrote {} frames to {}; pixelation error mean {:.5}",
        summary.frames,
        a.out.display(),
        summary.pixelation.mean
    );
    Ok(())
}

fn checkpoint_name(seed: u64) -> String {
    format!("checkpoint-seed{seed}.bdmn")
}

pub fn train(spec_path: &Path, o: &Overrides) -> Result<()> {
    let spec = load_spec(spec_path, o)?;
    let (data, horizon) = spec.prepare(&spec.model)?;
    eprintln!(
        "training {} ({} params) on {} train / {} val / {} test windows, seeds {:?}",
        spec.model.label(),
        param_count_formula(&spec.model),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        spec.train.seeds
    );
    let runs: Vec<TrainedRun> = if spec.train.seeds.len() == 1 {
        vec![train_one(
            &spec.model,
            &spec.train,
            &data,
            spec.train.seeds[0],
        )?]
    } else {
        multi_run(&spec.model, &spec.train, &data)?
    };
    for run in &runs {
        let ck = Checkpoint {
            config: ModelConfig {
                seed: run.record.seed,
                ..spec.model.clone()
            },
            params: run.params.clone(),
            meta: CheckpointMeta {
                normalization: Some(data.norm),
                horizon,
                splits: Some(spec.splits),
                seed: run.record.seed,
            },
        };
        save_checkpoint(&ck, &spec.output_dir.join(checkpoint_name(run.record.seed)))?;
    }
    let records: Vec<RunRecord> = runs.into_iter().map(|r| r.record).collect();
    write_runs(&spec.output_dir.join("runs.jsonl"), &records)?;
    for r in &records {
        match (r.test_mse, &r.error) {
            (Some(m), _) => println!(
                "seed {}: test mse {m:.6} after {} epochs",
                r.seed, r.epochs_run
            ),
            (None, e) => println!(
                "seed {}: failed ({})",
                r.seed,
                e.as_deref().unwrap_or("unknown")
            ),
        }
    }
    let summary = summarize(&records, true)?;
    write_json(&spec.output_dir.join("summary.json"), &summary)?;
    println!(
        "test mse {:.6} ± {:.6} over {} runs",
        summary.test_mse_mean,
        summary.test_mse_std,
        summary.runs - summary.failed
    );
    if summary.failed > 0 {
        return Err(bdmnn::Error::Runtime(format!(
            "{} of {} runs failed",
            summary.failed, summary.runs
        ))
        .into());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    samples: usize,
    /// Metrics on z-scored values, the scale the model trains on.
    mse: f64,
    mae: f64,
    mse_original_units: f64,
    mae_original_units: f64,
    /// Per-cell MAE in original units.
    per_cell_mae: Vec<Vec<f64>>,
}

pub fn eval(
    checkpoint: &Path,
    dataset: &Path,
    split: &str,
    out_dir: &Path,
    heatmaps: &[String],
) -> Result<()> {
    let formats: Vec<HeatmapFormat> = heatmaps
        .iter()
        .map(|f| f.parse())
        .collect::<bdmnn::Result<_>>()?;
    let ck = load_checkpoint(checkpoint)?;
    let mut ds = read_dataset_file(dataset)?;
    let horizon = check_compat(&ck.config, &ds)?;
    if horizon != ck.meta.horizon {
        return Err(usage(format!(
            "checkpoint was trained for horizon {}, dataset implies {horizon}",
            ck.meta.horizon
        )));
    }
    let norm = ck
        .meta
        .normalization
        .ok_or_else(|| usage("checkpoint has no normalization statistics"))?;
    let window = ck.config.window;
    let part = match split {
        "all" => ds,
        "train" | "val" | "test" => {
            let fractions = ck
                .meta
                .splits
                .ok_or_else(|| usage("checkpoint records no split fractions"))?;
            let s = chrono_split(&ds, fractions, window + horizon)?;
            match split {
                "train" => s.train,
                "val" => s.val,
                _ => s.test,
            }
        }
        other => {
            return Err(usage(format!(
                "unknown split `{other}` (train, val, test, all)"
            )))
        }
    };
    ds = part;
    ds.norm = Some(norm);
    let samples = make_windows(&ds.normalized(), window, horizon)?;
    let pred = predict(&ck.params, &ck.config, &samples, 8)?;
    let rep = metric_report(&pred, &targets(&samples)?)?;
    let per_cell: Vec<Vec<f64>> = rep
        .per_cell_mae
        .iter()
        .map(|row| row.iter().map(|v| v * norm.std).collect())
        .collect();
    let report = EvalReport {
        split: split.to_string(),
        samples: samples.len(),
        mse: rep.mse,
        mae: rep.mae,
        mse_original_units: rep.mse * norm.std * norm.std,
        mae_original_units: rep.mae * norm.std,
        per_cell_mae: per_cell,
    };
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_json(&out_dir.join("metrics.json"), &report)?;
    for f in formats {
        let name = match f {
            HeatmapFormat::Csv => "mae_heatmap.csv",
            HeatmapFormat::Pgm => "mae_heatmap.pgm",
        };
        export_heatmap(&report.per_cell_mae, &out_dir.join(name), f)?;
    }
    println!(
        "{split}: mse {:.6} mae {:.6} over {} samples",
        report.mse, report.mae, report.samples
    );
    Ok(())
}

/// `bidepth` or `bidepth+convlstm`; the encoder defaults to the spec's.
fn parse_variant(text: &str, template: &ModelConfig) -> Result<ModelConfig> {
    let (enc, ts) = match text.split_once('+') {
        Some((e, t)) => (e, Some(t)),
        None => (text, None),
    };
    let encoder_variant: EncoderVariant = enc.trim().parse()?;
    let ts_encoder: TsEncoder = match ts {
        Some(t) => t.trim().parse()?,
        None => template.ts_encoder,
    };
    Ok(ModelConfig {
        encoder_variant,
        ts_encoder,
        ..template.clone()
    })
}

/// Largest budget mismatch still treated as a fair comparison, as a fraction.
const BUDGET_TOLERANCE: f64 = 0.15;
const MAX_BUDGET_KERNEL: usize = 25;

fn match_budgets(configs: Vec<ModelConfig>) -> Vec<ModelConfig> {
    let counts: Vec<usize> = configs.iter().map(param_count_formula).collect();
    let target = counts.iter().copied().max().unwrap_or(0);
    configs
        .into_iter()
        .zip(counts)
        .map(|(cfg, n)| {
            if n == target {
                return cfg;
            }
            let tuned = kernel_for_budget(&cfg, target, MAX_BUDGET_KERNEL);
            let got = param_count_formula(&tuned);
            let gap = got.abs_diff(target) as f64 / target as f64;
            eprintln!(
                "{}: kernel {} qkv {} gives {got} params vs {target} ({:+.1}%)",
                tuned.label(),
                tuned.kernel,
                tuned.qkv_kernel(),
                (got as f64 - target as f64) / target as f64 * 100.0
            );
            if gap > BUDGET_TOLERANCE {
                eprintln!(
                    "warning: {} is outside the parameter budget tolerance",
                    tuned.label()
                );
            }
            tuned
        })
        .collect()
}

pub fn ablate(
    spec_path: &Path,
    variants: &[String],
    match_budget: bool,
    o: &Overrides,
) -> Result<()> {
    let spec = load_spec(spec_path, o)?;
    if variants.is_empty() {
        return Err(usage("no variants given"));
    }
    let mut configs: Vec<ModelConfig> = variants
        .iter()
        .map(|v| parse_variant(v, &spec.model))
        .collect::<Result<_>>()?;
    for (i, c) in configs.iter().enumerate() {
        if configs[..i].iter().any(|p| p.label() == c.label()) {
            return Err(usage(format!("variant {} listed twice", c.label())));
        }
    }
    if match_budget {
        configs = match_budgets(configs);
    }
    let (data, _) = spec.prepare(&spec.model)?;
    let table = ablation(&configs, &spec.train, &data)?;
    for (cfg, recs) in configs.iter().zip(&table.records) {
        write_runs(
            &spec.output_dir.join(format!("runs-{}.jsonl", cfg.label())),
            recs,
        )?;
    }
    write_text(&spec.output_dir.join("ablation.md"), &table.to_markdown())?;
    write_text(&spec.output_dir.join("ablation.csv"), &table.to_csv())?;
    write_json(&spec.output_dir.join("ablation.json"), &table.rows)?;
    print!("{}", table.to_markdown());
    Ok(())
}

pub fn sweep(spec_path: &Path, depths: &[usize], o: &Overrides) -> Result<()> {
    let spec = load_spec(spec_path, o)?;
    let (data, _) = spec.prepare(&spec.model)?;
    let table = depth_sweep(&spec.model, depths, &spec.train, &data)?;
    write_text(&spec.output_dir.join("sweep.csv"), &table.to_csv())?;
    write_runs(&spec.output_dir.join("sweep-runs.jsonl"), &table.records)?;
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", table.to_csv());
    Ok(())
}

pub fn boot(
    a: &Path,
    b: &Path,
    n_boot: usize,
    seed: u64,
    add_one: bool,
    out: Option<&Path>,
) -> Result<()> {
    let ra = read_records(open(a)?).with_context(|| format!("in {}", a.display()))?;
    let rb = read_records(open(b)?).with_context(|| format!("in {}", b.display()))?;
    let seeds = |r: &[RunRecord]| {
        let mut s: Vec<u64> = r.iter().map(|x| x.seed).collect();
        s.sort_unstable();
        s
    };
    if ra.len() == rb.len() && seeds(&ra) != seeds(&rb) {
        eprintln!("warning: run lists have different seeds; win rate pairs them by seed order");
    }
    let report = bootstrap_test(&test_mses(&ra)?, &test_mses(&rb)?, n_boot, seed, add_one)?;
    if report.wide_uncertainty {
        eprintln!("warning: a single run per group gives a very wide bootstrap distribution");
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(path) = out {
        write_text(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    model: String,
    max_rel_err: f64,
    max_abs_err: f64,
    coords_checked: usize,
    kinks: usize,
    passed: bool,
}

pub fn gradcheck(eps: f64, tol: f64, seed: u64) -> Result<()> {
    let mut rows = Vec::new();
    for v in EncoderVariant::ALL {
        for ts in TsEncoder::ALL {
            let cfg = ModelConfig {
                encoder_variant: v,
                ts_encoder: ts,
                depth: 3,
                window: 4,
                c_in: 1,
                c_h: 2,
                c_out: 1,
                height: 5,
                width: 5,
                kernel: 3,
                qkv_kernel: None,
                c_hid: Some(2),
                attn_scale: false,
                seed,
            };
            let r = grad_check_model(&cfg, 2, seed, eps, tol)?;
            rows.push(GradcheckRow {
                model: cfg.label(),
                max_rel_err: r.max_rel_err,
                max_abs_err: r.max_abs_err,
                coords_checked: r.coords_checked,
                kinks: r.kinks,
                passed: r.passed,
            });
        }
    }
    println!("{}", serde_json::to_string_pretty(&rows)?);
    let failed: Vec<_> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.model.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(bdmnn::Error::Runtime(format!(
            "gradient check failed for {}",
            failed.join(", ")
        ))
        .into());
    }
    Ok(())
}
