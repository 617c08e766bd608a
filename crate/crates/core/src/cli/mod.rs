//! Command-line front end.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 unusable input (missing
//! file, parse or validation error, nothing to aggregate), 3 numeric failure
//! during training, 4 a sweep without a single successful run.

mod manifest;
mod report;
mod run;
mod sweep;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use manifest::{method_name, run_id, RunManifest, RunSummary, MANIFEST_SCHEMA};
pub use report::{cmd_correlate, cmd_report, load_records, record_from_manifest, REPORT_SCHEMA};
pub use run::{cmd_dump_hidden, cmd_run, execute};
pub use sweep::{cmd_sweep, parse_method, SweepSpec, SWEEP_SCHEMA};

use crate::error::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_NO_SUCCESS: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
    pub step: Option<u64>,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into(), step: None }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.message, "exit_code": self.code, "step": self.step }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NumericAtStep { step, .. } => Self { code: EXIT_NUMERIC, message: e.to_string(), step: Some(step) },
            Error::Numeric { .. } => Self { code: EXIT_NUMERIC, message: e.to_string(), step: None },
            Error::InvalidArgument(_) | Error::Json(_) => Self { code: EXIT_INPUT, message: e.to_string(), step: None },
            other => Self { code: EXIT_FAILURE, message: other.to_string(), step: None },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

pub(crate) fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError {
        code: EXIT_FAILURE,
        message: format!("cannot write {}: {e}", path.display()),
        step: None,
    })
}

/// Parses JSON, reporting the position of a syntax or schema error.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| {
        CliError::input(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    })
}

#[derive(Parser, Debug)]
#[command(name = "tacrl", version, about = "Task-agnostic continual RL on the quadratic optimization benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one configuration and write its results.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Random search over the synthetic hyperparameter space.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Standardized aggregate statistics per method and setting.
    Report {
        #[arg(long = "in")]
        input: String,
        #[arg(long, value_delimiter = ',', default_value = "total_timesteps,n_dims,n_tasks,regime")]
        group_by: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "iqm,top10,se2")]
        stats: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spearman correlations between run attributes and metrics.
    Correlate {
        #[arg(long = "in")]
        input: String,
        #[arg(long, value_delimiter = ',')]
        attrs: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the encoder's context vectors along evaluation episodes.
    DumpHidden {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Installs the logger. `TACRL_LOG` takes `error`, `info` or `debug`.
pub fn init_logging() {
    let level = match std::env::var("TACRL_LOG").as_deref() {
        Ok("error") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run { config, out, seed } => cmd_run(&config, &out, seed).map(|_| ()),
        Command::Sweep { spec, out, jobs } => cmd_sweep(&spec, &out, jobs).map(|_| ()),
        Command::Report { input, group_by, stats, out } => cmd_report(&input, &group_by, &stats, &out),
        Command::Correlate { input, attrs, metrics, out } => cmd_correlate(&input, &attrs, &metrics, &out),
        Command::DumpHidden { config, checkpoint, out } => cmd_dump_hidden(&config, &checkpoint, &out),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{}", e.to_json());
            e.code
        }
    }
}
