//! Command-line front end for the multiway model library: simulation,
//! fitting, imputation, cross-validation, and report aggregation, driven by
//! flat key=value config files with command-line overrides.
//!
//! The binary is a thin wrapper over [`run_from`]; integration tests call
//! the same entry point in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model_io;
pub mod modelspec;
pub mod seed;
pub mod svg;

use clap::{Parser, Subcommand, ValueEnum};
use config::Config;
use error::{CliError, Result};
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "multiway",
    version,
    about = "Array-variate normal models with Kronecker covariance: \
             simulate, fit, impute, cross-validate, report"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat key=value config file; flags below override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Root random seed (overrides the `seed` key).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (overrides the `out` key).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads for replication-parallel commands.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Output format for report plots.
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum Command {
    /// Generate a seeded truth model, complete arrays, and masked datasets.
    Simulate,
    /// Fit the configured model to a dataset and write parameter files.
    Fit,
    /// Impute the missing cells of a dataset under fitted parameters.
    Impute,
    /// Delete-refit-impute cross-validation with per-replication metrics.
    Cv,
    /// Aggregate metrics tables into quartile summaries and plot data.
    Report,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum OutputFormat {
    Csv,
    Svg,
}

impl OutputFormat {
    fn key_value(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Svg => "svg",
        }
    }
}

fn resolve_format(cfg: &Config) -> Result<OutputFormat> {
    match cfg.get("format") {
        None | Some("csv") => Ok(OutputFormat::Csv),
        Some("svg") => Ok(OutputFormat::Svg),
        Some(other) => Err(CliError::config(format!(
            "key 'format': '{other}' is not 'csv' or 'svg'"
        ))),
    }
}

fn configure_threads(cfg: &Config) -> Result<()> {
    let Some(n) = cfg.get_usize("threads")? else {
        return Ok(());
    };
    if n == 0 {
        return Err(CliError::config("key 'threads': must be at least 1".to_string()));
    }
    #[cfg(feature = "parallel")]
    {
        // A failure means a pool already exists (e.g. a second run in the
        // same process); outputs do not depend on the pool size, so keep
        // going with the pool we have.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        eprintln!("note: built without the 'parallel' feature; running single-threaded");
    }
    Ok(())
}

/// Merges the config file with command-line overrides and dispatches.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::empty(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed.to_string());
    }
    if let Some(out) = &cli.out {
        cfg.set("out", out.display().to_string());
    }
    if let Some(threads) = cli.threads {
        cfg.set("threads", threads.to_string());
    }
    if let Some(format) = cli.format {
        cfg.set("format", format.key_value().to_string());
    }
    let format = resolve_format(&cfg)?;
    configure_threads(&cfg)?;

    match cli.command {
        Command::Simulate => commands::simulate::run(&cfg),
        Command::Fit => commands::fit::run(&cfg),
        Command::Impute => commands::impute::run(&cfg),
        Command::Cv => commands::cv::run(&cfg),
        Command::Report => commands::report::run(&cfg, format),
    }
}

/// Full command-line entry point returning the process exit code:
/// 0 success, 2 config error, 3 data error, 4 numerical failure, 5 I/O.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // usage errors are config errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
