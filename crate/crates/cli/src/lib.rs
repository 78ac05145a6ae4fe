//! Command-line driver: dataset generation, experiment sweeps and reports.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or configs, 2 when a
//! run fails.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use trustal::dataset::ImbalanceSpec;

pub mod commands;
pub mod config;

pub use commands::{cmd_gen_data, cmd_report, cmd_run, GenDataArgs, RunOverrides};
pub use config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Validation(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<trustal::Error> for CliError {
    fn from(e: trustal::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "trustal", version, about = "Batch active learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Imbalance {
    None,
    Linear,
    Longtail,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture dataset as CSV.
    GenData {
        /// Take the dataset block of an experiment config instead of the flags below.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 3.0)]
        sep: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Class-size profile: linear is 1:2:...:C, longtail decays by --factor.
        #[arg(long, value_enum, default_value_t = Imbalance::None)]
        imbalance: Imbalance,
        #[arg(long, default_value_t = 10.0)]
        factor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every strategy and seed of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only these strategies (repeatable).
        #[arg(long = "strategy")]
        strategies: Vec<String>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the number of processors.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Recompute summaries and the penalty matrix from stored run logs.
    Report {
        /// One directory per benchmark.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Writes to stdout, ignoring a closed pipe (e.g. output piped into `head`).
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            config,
            classes,
            dim,
            per_class,
            sep,
            seed,
            imbalance,
            factor,
            out,
        } => {
            let imbalance = match imbalance {
                Imbalance::None => ImbalanceSpec::None,
                Imbalance::Linear => ImbalanceSpec::linear_steps(classes),
                Imbalance::Longtail => ImbalanceSpec::ExponentialLongtail { factor },
            };
            let args = GenDataArgs {
                num_classes: classes,
                dim,
                per_class,
                class_sep: sep,
                seed,
                imbalance,
            };
            let counts = cmd_gen_data(config.as_deref(), &args, &out)?;
            let mut text = format!("wrote {}\n", out.display());
            for (name, n) in counts {
                text += &format!("class {name}: {n}\n");
            }
            emit(&text);
            Ok(())
        }
        Command::Run {
            config,
            seed,
            strategies,
            out,
            jobs,
            quiet,
        } => {
            let overrides = RunOverrides {
                seed,
                strategies,
                out,
                jobs,
                quiet,
            };
            let result = cmd_run(&config, &overrides)?;
            let summary = std::fs::read_to_string(&result.summary_path)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            emit(&format!("{summary}results in {}\n", result.out_dir.display()));
            Ok(())
        }
        Command::Report { dirs, out } => {
            let result = cmd_report(&dirs, out.as_deref())?;
            for p in result.summaries.iter().chain([&result.penalty]) {
                emit(&format!("wrote {}\n", p.display()));
            }
            Ok(())
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
