//! The active-learning driver and its metrics.
//!
//! Each round retrains the learner from scratch on the labeled set, records
//! test accuracy, and (budget permitting) asks the strategy for the next
//! batch, which the oracle then labels.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterConfig, FeatureTable};
use crate::dataset::{init_split, reveal_labels, Dataset, InitPolicy, Sample};
use crate::error::{arg_err, Error, Result};
use crate::learner::{accuracy, features, train_from_scratch, ModelParams, TrainConfig};
use crate::rl::RLConfig;
use crate::strategies::{
    select, LabelAccess, PolicySettings, SelectionContext, SelectionInfo, Strategy,
};
use crate::transport::TransportConfig;
use crate::trustset::{SuperLossConfig, TrustSetConfig};
use crate::{derive_seed, SampleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ALConfig {
    pub initial_labeled: usize,
    /// Total labeled-set size at which the loop stops.
    pub budget: usize,
    pub batch: usize,
    pub test_fraction: f64,
    pub init_policy: InitPolicy,
    pub learner: TrainConfig,
    pub trustset: TrustSetConfig,
    /// SuperLoss threshold; `None` means `ln(num_classes)`.
    pub superloss_tau: Option<f64>,
    pub superloss_lambda: f64,
    pub cluster: ClusterConfig,
    pub rl: RLConfig,
    pub transport: TransportConfig,
    /// Z-score learner features (over the training pool) before clustering
    /// and distance computations.
    pub normalize_features: bool,
    pub seed: u64,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            initial_labeled: 50,
            budget: 300,
            batch: 25,
            test_fraction: 0.2,
            init_policy: InitPolicy::Random,
            learner: TrainConfig::default(),
            trustset: TrustSetConfig::default(),
            superloss_tau: None,
            superloss_lambda: 1.0,
            cluster: ClusterConfig::default(),
            rl: RLConfig::default(),
            transport: TransportConfig::default(),
            normalize_features: false,
            seed: 0,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return arg_err("batch must be >= 1");
        }
        let l0 = self.init_policy.initial_size(self.initial_labeled);
        if l0 == 0 {
            return arg_err("initial labeled set must be non-empty");
        }
        if self.budget < l0 {
            return arg_err(format!("budget {} is below the initial labeled size {l0}", self.budget));
        }
        if self.trustset.ensemble_size == 0 {
            return arg_err("trustset.ensemble_size must be >= 1");
        }
        if !(self.superloss_lambda > 0.0) {
            return arg_err("superloss_lambda must be positive");
        }
        self.learner.validate()?;
        self.cluster.validate()?;
        self.rl.validate()
    }

    pub fn superloss(&self, num_classes: usize) -> SuperLossConfig {
        let mut sl = SuperLossConfig::for_classes(num_classes, self.superloss_lambda);
        if let Some(tau) = self.superloss_tau {
            sl.tau = tau;
        }
        sl
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub labeled_count: usize,
    pub accuracy: f64,
    /// Wall time of the round (training, evaluation and selection).
    pub seconds: f64,
    pub labeled_class_counts: Vec<usize>,
    pub selection: SelectionInfo,
    /// Labels of unlabeled-pool samples read by the strategy this round.
    pub pool_label_reads: usize,
    /// Ids labeled at the end of this round, in selection order.
    pub selected: Vec<SampleId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub strategy: String,
    pub seed: u64,
    pub budget: usize,
    pub records: Vec<IterationRecord>,
    pub final_model: Option<ModelParams>,
}

impl RunLog {
    /// `(labeled_count / budget, accuracy)` per record.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .map(|r| (r.labeled_count as f64 / self.budget as f64, r.accuracy))
            .collect()
    }

    /// The log with wall times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunLog {
        let mut out = self.clone();
        out.records.iter_mut().for_each(|r| r.seconds = 0.0);
        out
    }
}

fn train_ensemble(
    samples: &[&Sample],
    num_classes: usize,
    cfg: &ALConfig,
    iteration: usize,
) -> Result<Vec<ModelParams>> {
    let base = derive_seed(cfg.seed, 7, cfg.learner.seed);
    (0..cfg.trustset.ensemble_size)
        .map(|e| {
            let learner = TrainConfig {
                seed: derive_seed(base, iteration as u64, e as u64),
                ..cfg.learner.clone()
            };
            train_from_scratch(samples, num_classes, &learner).map_err(|err| match err {
                Error::Numeric(msg) => Error::Numeric(format!("iteration {iteration}: {msg}")),
                other => other,
            })
        })
        .collect()
}

fn feature_table(dataset: &Dataset, params: &ModelParams, ids: &[SampleId], normalize: bool) -> Result<FeatureTable> {
    let mut rows = vec![Vec::new(); dataset.len()];
    for &id in ids {
        rows[id] = features(params, dataset.features(id))?;
    }
    if normalize && !ids.is_empty() {
        let dim = params.feature_dim();
        let n = ids.len() as f64;
        for j in 0..dim {
            let mean = ids.iter().map(|&id| rows[id][j]).sum::<f64>() / n;
            let var = ids.iter().map(|&id| (rows[id][j] - mean).powi(2)).sum::<f64>() / n;
            let scale = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
            for &id in ids {
                rows[id][j] = (rows[id][j] - mean) * scale;
            }
        }
    }
    Ok(FeatureTable::new(rows))
}

/// Runs one strategy for one seed.
pub fn run(dataset: &Dataset, cfg: &ALConfig, strategy: Strategy) -> Result<RunLog> {
    cfg.validate()?;
    let c = dataset.num_classes();
    let mut split = init_split(
        dataset,
        cfg.initial_labeled,
        cfg.test_fraction,
        cfg.seed,
        cfg.init_policy,
    )?;
    if cfg.budget > split.labeled.len() + split.unlabeled.len() {
        return arg_err(format!(
            "budget {} exceeds the training pool of {}",
            cfg.budget,
            split.labeled.len() + split.unlabeled.len()
        ));
    }
    if split.test.is_empty() {
        return arg_err("empty test set");
    }
    let inputs = FeatureTable::new(dataset.samples().iter().map(|s| s.features.clone()).collect());
    let superloss = cfg.superloss(c);
    let settings = PolicySettings {
        trustset: &cfg.trustset,
        superloss: &superloss,
        cluster: &cfg.cluster,
        rl: &cfg.rl,
        transport: &cfg.transport,
    };

    let mut records = Vec::new();
    let mut iteration = 0;
    loop {
        let started = Instant::now();
        let labeled: Vec<SampleId> = split.labeled.iter().copied().collect();
        let unlabeled: Vec<SampleId> = split.unlabeled.iter().copied().collect();
        let train: Vec<&Sample> = labeled.iter().map(|&id| dataset.get(id)).collect();
        let ensemble = train_ensemble(&train, c, cfg, iteration)?;
        let acc = accuracy(&ensemble[0], split.test.iter().map(|&id| dataset.get(id)))?;
        let labeled_class_counts = dataset.class_counts_of(&labeled);

        let remaining = cfg.budget - labeled.len();
        if remaining == 0 {
            records.push(IterationRecord {
                iteration,
                labeled_count: labeled.len(),
                accuracy: acc,
                seconds: started.elapsed().as_secs_f64(),
                labeled_class_counts,
                selection: SelectionInfo::default(),
                pool_label_reads: 0,
                selected: Vec::new(),
            });
            return Ok(RunLog {
                strategy: strategy.name().to_string(),
                seed: cfg.seed,
                budget: cfg.budget,
                records,
                final_model: ensemble.into_iter().next(),
            });
        }

        let mut pool_ids: Vec<SampleId> = labeled.clone();
        pool_ids.extend_from_slice(&unlabeled);
        let feats = feature_table(dataset, &ensemble[0], &pool_ids, cfg.normalize_features)?;
        let labels = LabelAccess::new(dataset, &split.unlabeled, strategy.reads_pool_labels());
        let ctx = SelectionContext {
            inputs: &inputs,
            features: &feats,
            ensemble: &ensemble,
            labeled: &labeled,
            unlabeled: &unlabeled,
            labels: &labels,
            batch: remaining.min(cfg.batch),
            seed: derive_seed(cfg.seed, 8, iteration as u64),
            policy: settings,
        };
        let selection = select(strategy, &ctx).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("iteration {iteration}: {msg}")),
            other => other,
        })?;
        let pool_label_reads = labels.pool_reads();
        split = reveal_labels(&split, &selection.ids)?;
        records.push(IterationRecord {
            selected: selection.ids,
            iteration,
            labeled_count: labeled.len(),
            accuracy: acc,
            seconds: started.elapsed().as_secs_f64(),
            labeled_class_counts,
            selection: selection.info,
            pool_label_reads,
        });
        iteration += 1;
    }
}

/// Runs every (strategy, seed) pair in parallel. Results are ordered by
/// strategy, then seed, as given.
pub fn run_grid(
    dataset: &Dataset,
    cfg: &ALConfig,
    strategies: &[Strategy],
    seeds: &[u64],
) -> Result<Vec<RunLog>> {
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    jobs.par_iter()
        .map(|&(strategy, seed)| {
            let cfg = ALConfig {
                seed,
                ..cfg.clone()
            };
            run(dataset, &cfg, strategy)
        })
        .collect()
}

/// Trapezoidal area under accuracy vs. `labeled / budget`, divided by the
/// span of budget fractions. A single point yields its accuracy.
pub fn aubc_of_curve(curve: &[(f64, f64)]) -> Result<f64> {
    match curve {
        [] => arg_err("empty accuracy curve"),
        [(_, acc)] => Ok(*acc),
        _ => {
            let area: f64 = curve
                .windows(2)
                .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
                .sum();
            let span = curve.last().unwrap().0 - curve[0].0;
            if span <= 0.0 {
                return arg_err("budget fractions must increase");
            }
            Ok(area / span)
        }
    }
}

pub fn aubc(log: &RunLog) -> Result<f64> {
    aubc_of_curve(&log.curve())
}

/// Accuracy once the budget is spent.
pub fn f_acc(log: &RunLog) -> Result<f64> {
    log.records
        .last()
        .map(|r| r.accuracy)
        .ok_or_else(|| Error::Argument("empty run log".into()))
}

/// Pairwise win counts. Each benchmark maps method name to its accuracy at
/// each budget; `e[i][j]` counts (benchmark, budget) cells where method `i`
/// is strictly more accurate than method `j`.
pub fn penalty_matrix(
    methods: &[String],
    benchmarks: &[BTreeMap<String, Vec<f64>>],
) -> Result<Vec<Vec<u64>>> {
    let k = methods.len();
    let mut e = vec![vec![0u64; k]; k];
    for bench in benchmarks {
        let curves: Vec<&Vec<f64>> = methods
            .iter()
            .map(|m| {
                bench
                    .get(m)
                    .ok_or_else(|| Error::Argument(format!("benchmark lacks method {m:?}")))
            })
            .collect::<Result<_>>()?;
        let budgets = curves.first().map_or(0, |c| c.len());
        if curves.iter().any(|c| c.len() != budgets) {
            return arg_err("methods disagree on the number of budgets");
        }
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    e[i][j] += (0..budgets).filter(|&t| curves[i][t] > curves[j][t]).count() as u64;
                }
            }
        }
    }
    Ok(e)
}
