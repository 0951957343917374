//! `tesqdt`: batch driver for TES detector tomography.
//!
//! Exit codes: 0 success, 1 I/O error, 2 schema error, 3 numerical
//! failure, 4 lineage mismatch.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tesqdt::calibration::BinningMethod;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "tesqdt",
    version,
    about = "Quantum detector tomography and linearity validation for photon-number-resolving detectors"
)]
struct Cli {
    /// Pipeline configuration (JSON). Missing sections take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for per-probe stages (default: all cores). Results do
    /// not depend on this.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Combine artifacts even when their config hashes disagree.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one amplitude trace per probe, with truth sidecars and a manifest.
    Simulate {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit, threshold and bin every trace of a directory into a count table.
    Calibrate {
        /// Directory of trace files (`*.csv`).
        trace_dir: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        calibration: CalibrationFlags,
    },
    /// Reconstruct the POVM from a count table and its probe ensemble.
    Reconstruct {
        #[command(flatten)]
        inputs: InputFlags,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        reconstruction: ReconstructionFlags,
    },
    /// Maximum-likelihood efficiency (and optionally dark-count) estimate.
    Estimate {
        #[command(flatten)]
        inputs: InputFlags,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Fit a Poissonian dark-count rate jointly with the efficiency.
        #[arg(long)]
        dark_counts: bool,
    },
    /// Fidelity curve, three-way comparison and sensitivity sweep.
    Validate {
        #[arg(long, value_name = "FILE")]
        povm: PathBuf,
        #[command(flatten)]
        inputs: InputFlags,
        #[arg(long, value_name = "FILE")]
        estimate: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run every stage from one configuration into subdirectories of `--out`.
    Run {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dark_counts: bool,
        #[command(flatten)]
        calibration: CalibrationFlags,
        #[command(flatten)]
        reconstruction: ReconstructionFlags,
    },
}

#[derive(Debug, Args)]
struct InputFlags {
    /// Count table written by `calibrate`.
    #[arg(long, value_name = "FILE")]
    counts: PathBuf,
    /// Probe ensemble (written by `simulate`, or by hand).
    #[arg(long, value_name = "FILE")]
    ensemble: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Threshold,
    Area,
}

#[derive(Debug, Args)]
struct CalibrationFlags {
    /// How events are turned into counts.
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Number of outcomes N; the last one is cumulative.
    #[arg(long)]
    outcomes: Option<usize>,
    /// Leave out probes whose calibration fails instead of stopping.
    #[arg(long)]
    skip_failed: bool,
}

#[derive(Debug, Args)]
struct ReconstructionFlags {
    /// Weight of the smoothness penalty.
    #[arg(long)]
    reg_weight: Option<f64>,
    /// Fock-space truncation M.
    #[arg(long)]
    truncation: Option<usize>,
}

impl CalibrationFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(m) = self.method {
            cfg.calibration.method = match m {
                Method::Threshold => BinningMethod::Threshold,
                Method::Area => BinningMethod::Area,
            };
        }
        if let Some(n) = self.outcomes {
            cfg.reconstruction.n_outcomes = n;
        }
    }
}

impl ReconstructionFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(w) = self.reg_weight {
            cfg.reconstruction.reg_weight = w;
        }
        if let Some(m) = self.truncation {
            cfg.reconstruction.truncation = m;
        }
    }
}

/// The explicit `--config`, else `fallback` (e.g. the config recorded with
/// the traces), else the defaults.
fn load_config(path: Option<&Path>, fallback: Option<PipelineConfig>) -> CliResult<PipelineConfig> {
    match (path, fallback) {
        (Some(p), _) => PipelineConfig::load(Some(p)),
        (None, Some(cfg)) => Ok(cfg),
        (None, None) => Ok(PipelineConfig::default()),
    }
}

fn finish(mut cfg: PipelineConfig, edit: impl FnOnce(&mut PipelineConfig)) -> CliResult<PipelineConfig> {
    edit(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::schema("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::schema(format!("--jobs: {e}")))?;
    }
    let config_path = cli.config.as_deref();
    match &cli.command {
        Command::Simulate { out, seed } => {
            let cfg = finish(load_config(config_path, None)?, |c| {
                if let Some(s) = seed {
                    c.seed = *s;
                }
            })?;
            commands::simulate(&cfg, out)
        }
        Command::Calibrate { trace_dir, out, calibration } => {
            let inherited = if config_path.is_none() { commands::manifest_config(trace_dir)? } else { None };
            let cfg = finish(load_config(config_path, inherited)?, |c| calibration.apply(c))?;
            commands::calibrate(trace_dir, out, &cfg, calibration.skip_failed, cli.force)
        }
        Command::Reconstruct { inputs, out, reconstruction } => {
            let cfg = finish(load_config(config_path, None)?, |c| reconstruction.apply(c))?;
            commands::reconstruct(&inputs.counts, &inputs.ensemble, out, &cfg, cli.force)
        }
        Command::Estimate { inputs, out, dark_counts } => {
            let cfg = load_config(config_path, None)?;
            commands::estimate(&inputs.counts, &inputs.ensemble, out, &cfg, *dark_counts, cli.force)
        }
        Command::Validate { povm, inputs, estimate, out } => {
            let cfg = load_config(config_path, None)?;
            commands::validate(povm, &inputs.counts, &inputs.ensemble, estimate, out, &cfg, cli.force).map(|_| ())
        }
        Command::Run { out, seed, dark_counts, calibration, reconstruction } => {
            let cfg = finish(load_config(config_path, None)?, |c| {
                if let Some(s) = seed {
                    c.seed = *s;
                }
                calibration.apply(c);
                reconstruction.apply(c);
            })?;
            commands::run(&cfg, out, calibration.skip_failed, *dark_counts).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
