//! `stareal` — spatio-temporal analysis of areal count panels.
//!
//! Subcommands mirror the pipeline stages: `fuse` builds the modelling
//! panel from the raw inputs, `moran` tests spatial autocorrelation,
//! `lasso` selects covariates, `car` fits and compares the Bayesian
//! spatio-temporal models, `trends` emits descriptive series, `synth`
//! fabricates a ground-truth input bundle, and `all` chains the analysis
//! stages end to end.
//!
//! Exit codes: 0 success, 1 completed with warnings (non-convergence),
//! 2 input error, 3 internal error.

mod commands;
mod config;
mod error;
mod geojson;
mod io;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::commands::{car, fuse, lasso, moran, synth, trends, Ctx};
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult, RunStatus};

/// Environment variable naming the default configuration file.
const CONFIG_ENV: &str = "STAREAL_CONFIG";

#[derive(Parser)]
#[command(
    name = "stareal",
    version,
    about = "Spatio-temporal modelling of areal admission counts"
)]
struct Args {
    /// Configuration file (TOML); defaults to $STAREAL_CONFIG, then
    /// ./stareal.toml if present, then built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory, overriding the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override every stage seed with one value.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Exclusion list (one region id per line, `#` comments); replaces the
    /// configured exclusions.
    #[arg(long, global = true, value_name = "PATH")]
    exclude_file: Option<PathBuf>,

    /// Worker threads for MCMC chains (results do not depend on this).
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse points, income, events and geometry into the modelling panel.
    Fuse,
    /// Global Moran's I per year plus the aggregated surface.
    Moran,
    /// Cross-validated negative binomial LASSO covariate selection.
    Lasso,
    /// Fit and compare the CAR model variants; emit summaries and risk maps.
    Car,
    /// Generate a synthetic input bundle with known ground truth.
    Synth,
    /// Descriptive trend series from the raw events.
    Trends {
        /// Emit one series instead of all applicable ones.
        #[arg(long, value_enum)]
        group_by: Option<trends::GroupBy>,
    },
    /// Run fuse, moran, lasso, car and trends in sequence.
    All,
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Fuse => "fuse",
        Command::Moran => "moran",
        Command::Lasso => "lasso",
        Command::Car => "car",
        Command::Synth => "synth",
        Command::Trends { .. } => "trends",
        Command::All => "all",
    }
}

fn resolve_config(args: &Args) -> CliResult<PipelineConfig> {
    if let Some(path) = &args.config {
        return PipelineConfig::load(path);
    }
    if let Ok(path) = std::env::var(CONFIG_ENV) {
        if !path.is_empty() {
            return PipelineConfig::load(Path::new(&path));
        }
    }
    let fallback = Path::new("stareal.toml");
    if fallback.exists() {
        return PipelineConfig::load(fallback);
    }
    Ok(PipelineConfig::default())
}

fn execute(args: Args) -> CliResult<RunStatus> {
    if args.threads == 0 {
        return Err(CliError::input("--threads must be at least 1"));
    }
    let mut config = resolve_config(&args)?;
    if let Some(seed) = args.seed {
        config.override_seed(seed);
    }
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    if let Some(path) = &args.exclude_file {
        config.exclusions.regions = io::read_exclusions(path)?;
    }
    config.validate()?;

    let config_hash = config.hash()?;
    let ctx = Ctx {
        config,
        config_hash,
        threads: args.threads,
    };

    // Echo the fully resolved configuration so the run is self-describing;
    // its hash is what every output header refers to.
    let body = ctx.config.to_toml()?;
    io::write_text(
        &ctx.out("run-config.toml"),
        &ctx.meta(command_name(&args.command)),
        &body,
    )?;

    match args.command {
        Command::Fuse => fuse::run(&ctx),
        Command::Moran => moran::run(&ctx),
        Command::Lasso => lasso::run(&ctx),
        Command::Car => car::run(&ctx),
        Command::Synth => synth::run(&ctx),
        Command::Trends { group_by } => trends::run(&ctx, group_by),
        Command::All => {
            let mut status = fuse::run(&ctx)?;
            status.merge(moran::run(&ctx)?);
            status.merge(lasso::run(&ctx)?);
            status.merge(car::run(&ctx)?);
            status.merge(trends::run(&ctx, None)?);
            Ok(status)
        }
    }
}

fn main() {
    let args = Args::parse();
    let code = match execute(args) {
        Ok(status) => {
            for warning in &status.warnings {
                eprintln!("warning: {warning}");
            }
            if status.warnings.is_empty() {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
