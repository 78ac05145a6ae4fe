//! The `gen-data`, `run` and `report` subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use trustal::al_loop::{aubc, f_acc, run, RunLog};
use trustal::dataset::{apply_imbalance, gen_gaussian_mixture, Dataset, ImbalanceSpec};
use trustal::report::{
    mean_curve, penalty_from_logs, read_runlog_dir, strategy_order, summarize, write_curve,
    write_diagnostics, write_penalty, write_runlogs, write_summary,
};
use trustal::strategies::Strategy;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Generator settings for `gen-data` without a config file.
#[derive(Debug, Clone)]
pub struct GenDataArgs {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub class_sep: f64,
    pub seed: u64,
    pub imbalance: ImbalanceSpec,
}

/// Writes a dataset CSV and returns its per-class counts.
pub fn cmd_gen_data(
    config: Option<&Path>,
    args: &GenDataArgs,
    out: &Path,
) -> Result<Vec<(String, usize)>, CliError> {
    let dataset = match config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            let dataset_errors: Vec<String> = cfg
                .violations()
                .into_iter()
                .filter(|v| v.starts_with("dataset."))
                .collect();
            if !dataset_errors.is_empty() {
                return Err(CliError::Validation(format!(
                    "invalid config:\n  {}",
                    dataset_errors.join("\n  ")
                )));
            }
            cfg.dataset.materialize()?
        }
        None => {
            let base = gen_gaussian_mixture(
                args.num_classes,
                args.dim,
                args.per_class,
                args.class_sep,
                args.seed,
            )
            .map_err(|e| CliError::Validation(e.to_string()))?;
            apply_imbalance(&base, &args.imbalance, args.seed)
                .map_err(|e| CliError::Validation(e.to_string()))?
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    dataset.write_csv(out)?;
    Ok(dataset
        .class_names()
        .iter()
        .cloned()
        .zip(dataset.class_counts())
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    /// Restricts the run to these strategies (each must be in the config).
    pub strategies: Vec<String>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    /// Suppress per-run progress lines on stderr.
    pub quiet: bool,
}

#[derive(Debug, Serialize)]
struct Manifest {
    version: String,
    config_sha256: String,
    dataset_sha256: String,
    dataset_samples: usize,
    seeds: Vec<u64>,
    strategies: Vec<String>,
    config_file: String,
}

/// What `cmd_run` produced.
#[derive(Debug)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub logs: Vec<RunLog>,
    pub summary_path: PathBuf,
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &RunOverrides) -> Result<(), CliError> {
    if let Some(seed) = o.seed {
        cfg.seeds = vec![seed];
    }
    if !o.strategies.is_empty() {
        let missing: Vec<&String> = o.strategies.iter().filter(|s| !cfg.strategies.contains(s)).collect();
        if !missing.is_empty() {
            return Err(CliError::Validation(format!(
                "--strategy: {missing:?} not listed in the config's strategies {:?}",
                cfg.strategies
            )));
        }
        cfg.strategies.retain(|s| o.strategies.contains(s));
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if o.jobs == Some(0) {
        return Err(CliError::Validation("--jobs: must be >= 1".into()));
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn dataset_digest(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for s in ds.samples() {
        for v in &s.features {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update((s.label as u64).to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn file_stem(strategy: &str) -> String {
    strategy
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Runs every (strategy, seed) pair of the config and writes the result files.
pub fn cmd_run(config_path: &Path, overrides: &RunOverrides) -> Result<RunOutput, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    apply_overrides(&mut cfg, overrides)?;
    cfg.validate()?;

    let dataset = cfg.dataset.materialize()?;
    let strategies: Vec<Strategy> = cfg.parsed_strategies();
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let threads = overrides
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let started = Instant::now();
    let total = jobs.len();
    let logs: Vec<RunLog> = pool.install(|| {
        jobs.par_iter()
            .map(|&(strategy, seed)| {
                let log = run(&dataset, &cfg.al_config(seed), strategy)
                    .map_err(|e| CliError::Runtime(format!("{strategy} seed {seed}: {e}")))?;
                if !overrides.quiet {
                    eprintln!(
                        "[{:>7.1}s] {strategy} seed {seed}: AUBC {:.4}, F-acc {:.4} ({total} runs)",
                        started.elapsed().as_secs_f64(),
                        aubc(&log)?,
                        f_acc(&log)?,
                    );
                }
                Ok(log)
            })
            .collect::<Result<_, CliError>>()
    })?;

    // Single collector: everything below runs after all workers finish.
    let out = cfg.out_dir.clone();
    let runlog_dir = out.join("runlogs");
    let curve_dir = out.join("curves");
    let diag_dir = out.join("diagnostics");
    for dir in [&out, &runlog_dir, &curve_dir, &diag_dir] {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let config_text = cfg.to_toml();
    fs::write(out.join("config.toml"), &config_text).map_err(|e| io_err(&out, e))?;
    let manifest = Manifest {
        version: VERSION.to_string(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        dataset_sha256: dataset_digest(&dataset),
        dataset_samples: dataset.len(),
        seeds: cfg.seeds.clone(),
        strategies: cfg.strategies.clone(),
        config_file: "config.toml".into(),
    };
    let manifest_text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out.join("manifest.json"), manifest_text + "\n").map_err(|e| io_err(&out, e))?;

    for name in strategy_order(&logs) {
        let mine: Vec<RunLog> = logs.iter().filter(|l| l.strategy == name).cloned().collect();
        write_runlogs(&runlog_dir.join(format!("{}.csv", file_stem(&name))), &mine)?;
        write_curve(&curve_dir.join(format!("{}.csv", file_stem(&name))), &mean_curve(&logs, &name))?;
        write_diagnostics(&diag_dir.join(format!("{}.csv", file_stem(&name))), &mine)?;
    }
    let summary_path = out.join("summary.csv");
    write_summary(&summary_path, &summarize(&logs)?)?;
    let (methods, matrix) = penalty_from_logs(std::slice::from_ref(&logs))?;
    write_penalty(&out.join("penalty.csv"), &methods, &matrix)?;

    Ok(RunOutput {
        out_dir: out,
        logs,
        summary_path,
    })
}

/// Files written by `cmd_report`.
#[derive(Debug)]
pub struct ReportOutput {
    pub summaries: Vec<PathBuf>,
    pub penalty: PathBuf,
}

/// Recomputes summaries and the penalty matrix from stored run logs. Each
/// directory is one benchmark: either a `run` output directory or a
/// directory of run-log CSVs.
pub fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<ReportOutput, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Validation("report needs at least one run-log directory".into()));
    }
    let mut benchmarks = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let logs_dir = if dir.join("runlogs").is_dir() { dir.join("runlogs") } else { dir.clone() };
        if !logs_dir.is_dir() {
            return Err(CliError::Validation(format!("no such directory {}", dir.display())));
        }
        let logs = read_runlog_dir(&logs_dir)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", logs_dir.display())))?;
        if logs.is_empty() {
            return Err(CliError::Runtime(format!("no run logs in {}", logs_dir.display())));
        }
        benchmarks.push(logs);
    }
    let out = out.map_or_else(|| dirs[0].clone(), Path::to_path_buf);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;

    let mut summaries = Vec::new();
    for (i, logs) in benchmarks.iter().enumerate() {
        let path = if benchmarks.len() == 1 {
            out.join("summary.csv")
        } else {
            out.join(format!("summary_{i}.csv"))
        };
        write_summary(&path, &summarize(logs)?)?;
        summaries.push(path);
    }
    let (methods, matrix) = penalty_from_logs(&benchmarks)?;
    let penalty = out.join("penalty.csv");
    write_penalty(&penalty, &methods, &matrix)?;
    Ok(ReportOutput { summaries, penalty })
}
