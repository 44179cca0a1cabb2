//! Command-line front end.
//!
//! Every subcommand reads one JSON config (`--config`), applies flag overrides, writes its
//! artifacts under the output directory and records their content hashes in `metadata.json`.
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "regime-portfolio", version, about = "Regime-aware active/passive portfolio allocation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate a price path from a model.
    Simulate,
    /// Estimate a model by EM with state-count selection.
    Fit,
    /// Filter regime probabilities along observed data.
    Filter,
    /// Compute the optimal portfolio at one instant.
    Allocate,
    /// Run walk-forward backtests.
    Backtest,
}

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

fn init_logging(level: Option<&str>) {
    let env = env_logger::Env::default().default_filter_or(level.unwrap_or("warn"));
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config_path = cli.config.as_ref().ok_or_else(|| Error::Input("--config is required".into()))?;
    let config = RunConfig::from_file(config_path)?;
    init_logging(config.log_level.as_deref());
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Input("--threads must be positive".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    let base = config_path.parent().map(PathBuf::from).unwrap_or_default();
    let ctx = commands::Context {
        seed: cli.seed.or(config.seed),
        dt: config.dt,
        out: cli.out.clone().or_else(|| config.out.as_ref().map(|o| base.join(o))).unwrap_or_else(|| PathBuf::from("out")),
        base,
    };
    let missing = |name: &str| Error::Input(format!("config has no `{name}` section"));
    match cli.command {
        Command::Simulate => commands::simulate(&ctx, config.simulate.as_ref().ok_or_else(|| missing("simulate"))?),
        Command::Fit => commands::fit(&ctx, config.fit.as_ref().ok_or_else(|| missing("fit"))?),
        Command::Filter => commands::filter(&ctx, config.filter.as_ref().ok_or_else(|| missing("filter"))?),
        Command::Allocate => commands::allocate(&ctx, config.allocate.as_ref().ok_or_else(|| missing("allocate"))?),
        Command::Backtest => commands::backtest(&ctx, config.backtest.as_ref().ok_or_else(|| missing("backtest"))?),
    }
}
