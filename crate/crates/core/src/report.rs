//! CSV export and import of run logs, summaries, accuracy curves and the
//! penalty matrix.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::al_loop::{aubc, f_acc, penalty_matrix, IterationRecord, RunLog};
use crate::error::{Error, Result};
use crate::stats::mean_half_width;
use crate::strategies::{SelectionInfo, Strategy};

/// Confidence level of reported half-widths.
pub const CONFIDENCE: f64 = 0.95;

/// One line of a run-log CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub strategy: String,
    pub seed: u64,
    pub iteration: usize,
    pub labeled_count: usize,
    pub budget_fraction: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

pub fn write_runlogs(path: &Path, logs: &[RunLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for log in logs {
        for r in &log.records {
            w.serialize(RunRow {
                strategy: log.strategy.clone(),
                seed: log.seed,
                iteration: r.iteration,
                labeled_count: r.labeled_count,
                budget_fraction: r.labeled_count as f64 / log.budget as f64,
                accuracy: r.accuracy,
                seconds: r.seconds,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One line of a diagnostics CSV. Class counts are space-separated.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct DiagnosticRow {
    strategy: String,
    seed: u64,
    iteration: usize,
    labeled_class_counts: String,
    trustset_class_counts: Option<String>,
    buffer_size: Option<usize>,
    reward_mse: Option<f64>,
    empty_env_pairs: Option<usize>,
}

fn join_counts(counts: &[usize]) -> String {
    counts.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Per-iteration selection diagnostics; empty cells where a strategy has
/// nothing to report.
pub fn write_diagnostics(path: &Path, logs: &[RunLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for log in logs {
        for r in &log.records {
            w.serialize(DiagnosticRow {
                strategy: log.strategy.clone(),
                seed: log.seed,
                iteration: r.iteration,
                labeled_class_counts: join_counts(&r.labeled_class_counts),
                trustset_class_counts: r.selection.trustset_class_counts.as_deref().map(join_counts),
                buffer_size: r.selection.buffer_size,
                reward_mse: r.selection.reward_mse,
                empty_env_pairs: r.selection.empty_env_pairs,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads run logs back, grouped by (strategy, seed) in file order. Only the
/// CSV columns are restored; diagnostics are left empty.
pub fn read_runlogs(path: &Path) -> Result<Vec<RunLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut logs: Vec<RunLog> = Vec::new();
    for (i, row) in r.deserialize::<RunRow>().enumerate() {
        let row = row.map_err(|e| Error::Format {
            row: i + 2,
            msg: e.to_string(),
        })?;
        let budget = if row.budget_fraction > 0.0 {
            (row.labeled_count as f64 / row.budget_fraction).round() as usize
        } else {
            0
        };
        let record = IterationRecord {
            iteration: row.iteration,
            labeled_count: row.labeled_count,
            accuracy: row.accuracy,
            seconds: row.seconds,
            labeled_class_counts: Vec::new(),
            selection: SelectionInfo::default(),
            pool_label_reads: 0,
            selected: Vec::new(),
        };
        match logs
            .iter_mut()
            .find(|l| l.strategy == row.strategy && l.seed == row.seed)
        {
            Some(log) => log.records.push(record),
            None => logs.push(RunLog {
                strategy: row.strategy,
                seed: row.seed,
                budget,
                records: vec![record],
                final_model: None,
            }),
        }
    }
    Ok(logs)
}

/// Reads every `*.csv` run log in a directory (sorted by file name).
pub fn read_runlog_dir(dir: &Path) -> Result<Vec<RunLog>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut logs = Vec::new();
    for p in paths {
        logs.extend(read_runlogs(&p)?);
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub seeds: usize,
    pub aubc_mean: f64,
    pub aubc_half_width: f64,
    pub f_acc_mean: f64,
    pub f_acc_half_width: f64,
}

/// Distinct strategy names: known strategies in [`Strategy::ALL`] order, then
/// any others in order of first appearance. Independent of log order.
pub fn strategy_order(logs: &[RunLog]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for l in logs {
        if !names.contains(&l.strategy) {
            names.push(l.strategy.clone());
        }
    }
    let rank = |n: &String| Strategy::ALL.iter().position(|s| s.name() == n).unwrap_or(usize::MAX);
    names.sort_by_key(rank);
    names
}

pub fn summarize(logs: &[RunLog]) -> Result<Vec<StrategySummary>> {
    strategy_order(logs)
        .into_iter()
        .map(|name| {
            let mine: Vec<&RunLog> = logs.iter().filter(|l| l.strategy == name).collect();
            let aubcs: Vec<f64> = mine.iter().map(|l| aubc(l)).collect::<Result<_>>()?;
            let faccs: Vec<f64> = mine.iter().map(|l| f_acc(l)).collect::<Result<_>>()?;
            let (aubc_mean, aubc_half_width) = mean_half_width(&aubcs, CONFIDENCE);
            let (f_acc_mean, f_acc_half_width) = mean_half_width(&faccs, CONFIDENCE);
            Ok(StrategySummary {
                strategy: name,
                seeds: mine.len(),
                aubc_mean,
                aubc_half_width,
                f_acc_mean,
                f_acc_half_width,
            })
        })
        .collect()
}

pub fn write_summary(path: &Path, summary: &[StrategySummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "strategy",
        "seeds",
        "aubc_mean",
        "aubc_half_width",
        "f_acc_mean",
        "f_acc_half_width",
    ])?;
    for s in summary {
        w.write_record([
            s.strategy.clone(),
            s.seeds.to_string(),
            format!("{:.6}", s.aubc_mean),
            format!("{:.6}", s.aubc_half_width),
            format!("{:.6}", s.f_acc_mean),
            format!("{:.6}", s.f_acc_half_width),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean accuracy curve of one strategy: `(budget_fraction, mean, half_width)`
/// per iteration index.
pub fn mean_curve(logs: &[RunLog], strategy: &str) -> Vec<(f64, f64, f64)> {
    let mine: Vec<Vec<(f64, f64)>> = logs
        .iter()
        .filter(|l| l.strategy == strategy)
        .map(RunLog::curve)
        .collect();
    let len = mine.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|t| {
            let fracs: Vec<f64> = mine.iter().map(|c| c[t].0).collect();
            let accs: Vec<f64> = mine.iter().map(|c| c[t].1).collect();
            let (m, hw) = mean_half_width(&accs, CONFIDENCE);
            (crate::stats::mean(&fracs), m, hw)
        })
        .collect()
}

pub fn write_curve(path: &Path, curve: &[(f64, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["budget_fraction", "mean_accuracy", "half_width"])?;
    for (f, m, hw) in curve {
        w.write_record([format!("{f:.6}"), format!("{m:.6}"), format!("{hw:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Penalty matrix over strategies, treating the seed-averaged curve of each
/// benchmark (one set of logs per benchmark) as one accuracy per budget.
pub fn penalty_from_logs(benchmarks: &[Vec<RunLog>]) -> Result<(Vec<String>, Vec<Vec<u64>>)> {
    let mut methods: Vec<String> = Vec::new();
    for b in benchmarks {
        for name in strategy_order(b) {
            if !methods.contains(&name) {
                methods.push(name);
            }
        }
    }
    let tables: Vec<BTreeMap<String, Vec<f64>>> = benchmarks
        .iter()
        .map(|logs| {
            methods
                .iter()
                .map(|m| (m.clone(), mean_curve(logs, m).into_iter().map(|c| c.1).collect()))
                .collect()
        })
        .collect();
    Ok((methods.clone(), penalty_matrix(&methods, &tables)?))
}

pub fn write_penalty(path: &Path, methods: &[String], matrix: &[Vec<u64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string()];
    header.extend(methods.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in methods.iter().zip(matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
