//! `bdmnn`: reproducible experiments for the bidirectional-depth forecaster.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 runtime or
//! numeric failure.

mod commands;
mod spec;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "bdmnn",
    version,
    about = "Bidirectional-depth spatio-temporal forecasting experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a generator config (JSON).
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate trip records onto a zone grid.
    Ingest {
        #[arg(long)]
        trips: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        zones: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// First day to keep, `YYYY-MM-DD`.
        #[arg(long)]
        first_day: String,
        #[arg(long, default_value_t = 1)]
        days: usize,
        /// Daily window start, `HH:MM`.
        #[arg(long, default_value = "16:00")]
        start: String,
        /// Daily window end (exclusive), `HH:MM`.
        #[arg(long, default_value = "20:00")]
        end: String,
        #[arg(long, default_value_t = 15)]
        interval: u32,
        /// `time` (one frame per interval) or `channels` (one frame per day).
        #[arg(long, default_value = "time")]
        layout: String,
        /// Pixelation report path; defaults to `<out>.pixelation.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train every seed of an experiment spec.
    Train {
        spec: PathBuf,
        #[command(flatten)]
        overrides: commands::Overrides,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `train`, `val`, `test` or `all`.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Heatmap formats to write (`csv`, `pgm`).
        #[arg(long, value_delimiter = ',', default_value = "csv,pgm")]
        heatmap: Vec<String>,
    },
    /// Compare encoder variants on shared seeds; the first is the baseline.
    Ablate {
        spec: PathBuf,
        /// Variants such as `none`, `bidepth` or `deepshallow+convlstm`.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "none,deepshallow,shallowdeep,bidepth"
        )]
        variants: Vec<String>,
        /// Widen kernels so every variant matches the largest parameter count.
        #[arg(long)]
        match_budget: bool,
        #[command(flatten)]
        overrides: commands::Overrides,
    },
    /// Sweep the initial depth `L`.
    Sweep {
        spec: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        depths: Vec<usize>,
        #[command(flatten)]
        overrides: commands::Overrides,
    },
    /// Bootstrap significance of `a` (enhanced) over `b` (baseline) test MSEs.
    Boot {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n_boot: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report `(k + 1) / (n_boot + 1)` instead of `k / n_boot`.
        #[arg(long)]
        add_one: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full model's gradients at toy extents.
    Gradcheck {
        #[arg(long, default_value_t = bdmnn::tensor::DEFAULT_FD_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { config, seed, out } => commands::synth(&config, seed, &out),
        Command::Ingest {
            trips,
            mapping,
            zones,
            out,
            first_day,
            days,
            start,
            end,
            interval,
            layout,
            report,
        } => commands::ingest(commands::IngestArgs {
            trips,
            mapping,
            zones,
            out,
            first_day,
            days,
            start,
            end,
            interval,
            layout,
            report,
        }),
        Command::Train { spec, overrides } => commands::train(&spec, &overrides),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out_dir,
            heatmap,
        } => commands::eval(&checkpoint, &dataset, &split, &out_dir, &heatmap),
        Command::Ablate {
            spec,
            variants,
            match_budget,
            overrides,
        } => commands::ablate(&spec, &variants, match_budget, &overrides),
        Command::Sweep {
            spec,
            depths,
            overrides,
        } => commands::sweep(&spec, &depths, &overrides),
        Command::Boot {
            a,
            b,
            n_boot,
            seed,
            add_one,
            out,
        } => commands::boot(&a, &b, n_boot, seed, add_one, out.as_deref()),
        Command::Gradcheck { eps, tol, seed } => commands::gradcheck(eps, tol, seed),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|cause| {
        cause
            .downcast_ref::<bdmnn::Error>()
            .is_some_and(bdmnn::Error::is_usage)
            || cause.downcast_ref::<commands::UsageError>().is_some()
    });
    if usage {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
