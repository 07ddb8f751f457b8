//! Experiment runner: TOML config, one subcommand per experiment, CSV/JSON
//! outputs with a manifest.

mod config;
mod run;

use std::path::PathBuf;

use clap::Parser;

pub use config::{
    load_config, ComponentSpec, ConfigError, CovSpec, CoveringConfig, DriftKind, ExperimentConfig, InitKind,
    KlConfig, MixingConfig, ScoreErrorConfig, TargetSpec, VerifyConfig, OUTPUT_DIR_ENV,
};
pub use run::{run, run_path, CheckEntry, Command, MixingRow, Outcome, RunError};

#[derive(Debug, Parser)]
#[command(name = "vpsde", version, about = "VP-SDE sampling and verification experiments")]
pub struct Args {
    /// Experiment to run.
    #[arg(value_enum)]
    pub command: Command,

    /// TOML config file.
    #[arg(short, long)]
    pub config: PathBuf,

    /// Override a config value, e.g. `--set sigma=2` or `--set schedule.beta=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Parses command-line arguments and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    run_path(args.command, &args.config, &args.overrides)
}
