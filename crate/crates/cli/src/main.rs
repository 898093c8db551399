use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use fishformer_cli::ablate::{self, Axis};
use fishformer_cli::commands::{self, ParamSource, SynthArgs};
use fishformer_cli::config::RunConfig;
use fishformer_core::data::{Dataset, SamplingMode};
use fishformer_core::slicing::SlicingMode;

#[derive(Parser)]
#[command(
    name = "fishformer",
    version,
    about = "Fisheye distortion tools and a small rectification network"
)]
struct Cli {
    /// Log filter, e.g. `info` or `debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic fisheye dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        count: usize,
        #[arg(long, default_value_t = 100)]
        test_count: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "log-uniform")]
        sampling: SamplingMode,
        /// Directory of perspective images; procedural scenes otherwise.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Rasterize a distortion effective domain, or check the ordering laws.
    Deo {
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long, default_value_t = 1e-5)]
        k: f64,
        #[arg(long, default_value_t = 256)]
        radius: usize,
        /// Run the full ordering report instead of a single mask.
        #[arg(long)]
        report: bool,
        #[arg(long, default_value_t = 8)]
        intervals: usize,
        #[arg(long, default_value = "deo")]
        out: PathBuf,
    },
    /// Render a distortion distribution map.
    Ddm {
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        k1: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        k2: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        k3: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        k4: f64,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value = "ddm.png")]
        out: PathBuf,
    },
    /// Write one mask per patch of a partition.
    SliceDebug {
        #[arg(long, default_value = "annulus")]
        mode: SlicingMode,
        /// Ring count (annulus) or tile count (square).
        #[arg(long, default_value_t = 16)]
        rings: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value = "slices")]
        out: PathBuf,
    },
    /// Train on a built dataset.
    Train {
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides, e.g. `--set epochs=5`.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Undistort an image with a checkpoint or explicit coefficients.
    Rectify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, conflicts_with = "k")]
        checkpoint: Option<PathBuf>,
        /// Four comma-separated raw coefficients.
        #[arg(long, value_parser = parse_coefficients, allow_hyphen_values = true)]
        k: Option<[f64; 4]>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two directories of images with matching names.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        allow_missing: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every setting of one ablation axis.
    Ablate {
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every tape op and of the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of parameters checked end to end.
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
    },
}

fn parse_coefficients(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 4 coefficients, got {}", v.len()))
}

fn run_config(config: Option<PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn print(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            out,
            count,
            test_count,
            resolution,
            seed,
            sampling,
            source,
        } => print(&commands::synth(&SynthArgs {
            out,
            count,
            test_count,
            resolution,
            seed,
            sampling,
            source,
        })?)?,
        Command::Deo {
            order,
            k,
            radius,
            report,
            intervals,
            out,
        } => {
            if report {
                let r = commands::deo_report(intervals, radius, &out)?;
                let failed = r.checks.iter().filter(|c| !c.holds).count();
                println!(
                    "{} checks, {failed} failed; report in {}",
                    r.checks.len(),
                    out.join("deo_report.json").display()
                );
                return Ok(r.all_hold);
            }
            print(&commands::deo(order, k, radius, &out)?)?
        }
        Command::Ddm {
            k1,
            k2,
            k3,
            k4,
            size,
            out,
        } => print(&commands::ddm([k1, k2, k3, k4], size, &out)?)?,
        Command::SliceDebug { mode, rings, size, out } => print(&commands::slice_debug(mode, rings, size, &out)?)?,
        Command::Train { config, overrides } => {
            let report = commands::train_run(&run_config(config, &overrides)?)?;
            let last = report.final_val();
            println!(
                "val loss {:.4} (best {:.4} at epoch {}), val MAE {:.4} from {:.4}",
                last.total,
                report.best_val_loss,
                report.best_epoch,
                last.mae,
                report.initial_val_mae()
            );
        }
        Command::Rectify {
            input,
            checkpoint,
            k,
            out,
        } => {
            let source = match (checkpoint, k) {
                (Some(c), _) => ParamSource::Checkpoint(c),
                (None, Some(k)) => ParamSource::Explicit(k),
                (None, None) => anyhow::bail!("give --checkpoint or --k"),
            };
            print(&commands::rectify(&input, &source, &out)?)?
        }
        Command::Eval {
            pred,
            gt,
            allow_missing,
            out,
        } => {
            let report = commands::eval(&pred, &gt, allow_missing, out.as_deref())?;
            print(&report.mean)?
        }
        Command::Ablate {
            axis,
            config,
            overrides,
        } => {
            let cfg = run_config(config, &overrides)?;
            let data_dir = cfg.data.clone().context("no dataset given (set `data`)")?;
            let out = cfg.out.clone().context("no output directory given (set `out`)")?;
            let data = Dataset::open(&data_dir)?;
            print!("{}", ablate::run(axis, &cfg.train, &data, &out)?.markdown());
        }
        Command::Gradcheck { seed, fraction } => {
            let summary = commands::gradcheck(seed, fraction)?;
            for (name, r) in &summary.ops {
                println!("{name:<12} max rel err {:.2e}", r.max_rel_error);
            }
            println!(
                "end-to-end   max rel err {:.2e} over {} entries",
                summary.end_to_end.max_rel_error, summary.end_to_end.checked
            );
            return Ok(summary.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
