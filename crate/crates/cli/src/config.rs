//! Experiment configuration files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trustal::al_loop::ALConfig;
use trustal::clustering::ClusterConfig;
use trustal::dataset::{
    apply_imbalance, gen_gaussian_mixture, load_csv, Dataset, ImbalanceSpec, InitPolicy,
    LABEL_COLUMN,
};
use trustal::learner::TrainConfig;
use trustal::rl::RLConfig;
use trustal::strategies::Strategy;
use trustal::transport::TransportConfig;
use trustal::trustset::TrustSetConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetBlock,
    #[serde(default)]
    pub al: LoopBlock,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    /// Seeds generation and imbalance subsampling. Experiment seeds only
    /// affect splits and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_initial_labeled")]
    pub initial_labeled: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub init_policy: InitPolicy,
    pub source: DataSource,
    #[serde(default)]
    pub imbalance: ImbalanceSpec,
}

fn default_initial_labeled() -> usize {
    50
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Generator {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        class_sep: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_label_column() -> String {
    LABEL_COLUMN.to_string()
}

/// Loop and model settings shared by every run of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopBlock {
    /// Total labeled-set size at which each run stops.
    pub budget: usize,
    pub batch: usize,
    pub superloss_tau: Option<f64>,
    pub superloss_lambda: f64,
    pub normalize_features: bool,
    pub learner: TrainConfig,
    pub trustset: TrustSetConfig,
    pub cluster: ClusterConfig,
    pub rl: RLConfig,
    pub transport: TransportConfig,
}

impl Default for LoopBlock {
    fn default() -> Self {
        let al = ALConfig::default();
        Self {
            budget: al.budget,
            batch: al.batch,
            superloss_tau: al.superloss_tau,
            superloss_lambda: al.superloss_lambda,
            normalize_features: al.normalize_features,
            learner: al.learner,
            trustset: al.trustset,
            cluster: al.cluster,
            rl: al.rl,
            transport: al.transport,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file. A relative CSV path is taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if let DataSource::Csv { path: csv, .. } = &mut cfg.dataset.source {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parsed_strategies(&self) -> Vec<Strategy> {
        self.strategies.iter().filter_map(|s| s.parse().ok()).collect()
    }

    /// Loop settings for one seed.
    pub fn al_config(&self, seed: u64) -> ALConfig {
        let al = &self.al;
        ALConfig {
            initial_labeled: self.dataset.initial_labeled,
            budget: al.budget,
            batch: al.batch,
            test_fraction: self.dataset.test_fraction,
            init_policy: self.dataset.init_policy,
            learner: al.learner.clone(),
            trustset: al.trustset.clone(),
            superloss_tau: al.superloss_tau,
            superloss_lambda: al.superloss_lambda,
            cluster: al.cluster.clone(),
            rl: al.rl.clone(),
            transport: al.transport,
            normalize_features: al.normalize_features,
            seed,
        }
    }

    /// Every violated key, as `key: problem`.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut bad = |key: &str, msg: String| v.push(format!("{key}: {msg}"));

        if self.strategies.is_empty() {
            bad("strategies", "list is empty".into());
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.strategies.iter().enumerate() {
            if let Err(e) = s.parse::<Strategy>() {
                bad(&format!("strategies[{i}]"), e.to_string());
            } else if !seen.insert(s) {
                bad(&format!("strategies[{i}]"), format!("duplicate strategy {s:?}"));
            }
        }
        if self.seeds.is_empty() {
            bad("seeds", "list is empty".into());
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.seeds.iter().enumerate() {
            if !seen.insert(s) {
                bad(&format!("seeds[{i}]"), format!("duplicate seed {s}"));
            }
        }

        let ds = &self.dataset;
        let mut classes = None;
        let mut pool_estimate = None;
        match &ds.source {
            DataSource::Generator {
                num_classes,
                dim,
                per_class,
                class_sep,
            } => {
                if *num_classes < 2 {
                    bad("dataset.source.num_classes", format!("must be >= 2, got {num_classes}"));
                } else {
                    classes = Some(*num_classes);
                }
                if *dim < 2 {
                    bad("dataset.source.dim", format!("must be >= 2, got {dim}"));
                }
                if *per_class < 2 {
                    bad("dataset.source.per_class", format!("must be >= 2, got {per_class}"));
                }
                if !(*class_sep > 0.0 && class_sep.is_finite()) {
                    bad("dataset.source.class_sep", format!("must be positive, got {class_sep}"));
                }
                if let Some(c) = classes {
                    let total = match ds.imbalance.target_counts(c, *per_class) {
                        Ok(Some(counts)) => Some(counts.iter().sum::<usize>()),
                        Ok(None) => Some(c * per_class),
                        Err(_) => None,
                    };
                    if let Some(n) = total {
                        let test = (ds.test_fraction * n as f64).round() as usize;
                        pool_estimate = Some(n.saturating_sub(test));
                    }
                }
            }
            DataSource::Csv { path, label_column } => {
                if !path.is_file() {
                    bad("dataset.source.path", format!("no such file {}", path.display()));
                }
                if label_column.is_empty() {
                    bad("dataset.source.label_column", "must not be empty".into());
                }
            }
        }
        match &ds.imbalance {
            ImbalanceSpec::None => {}
            ImbalanceSpec::LinearRatio { ratios } => {
                if let Some(c) = classes.filter(|&c| c != ratios.len()) {
                    bad(
                        "dataset.imbalance.ratios",
                        format!("{} ratios for {c} classes", ratios.len()),
                    );
                }
                if ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                    bad("dataset.imbalance.ratios", "ratios must be positive".into());
                }
            }
            ImbalanceSpec::ExponentialLongtail { factor } => {
                if !(*factor >= 1.0 && factor.is_finite()) {
                    bad("dataset.imbalance.factor", format!("must be >= 1, got {factor}"));
                }
            }
        }
        if !(ds.test_fraction > 0.0 && ds.test_fraction < 1.0) {
            bad("dataset.test_fraction", format!("must lie in (0, 1), got {}", ds.test_fraction));
        }
        let l0 = ds.init_policy.initial_size(ds.initial_labeled);
        if l0 == 0 {
            bad("dataset.initial_labeled", "initial labeled set is empty".into());
        }

        let al = &self.al;
        if al.batch == 0 {
            bad("al.batch", "must be >= 1".into());
        }
        if al.budget < l0 {
            bad("al.budget", format!("{} is below the initial labeled size {l0}", al.budget));
        }
        if let Some(pool) = pool_estimate.filter(|&p| al.budget > p) {
            bad("al.budget", format!("{} exceeds the training pool of about {pool}", al.budget));
        }
        if let Some(tau) = al.superloss_tau.filter(|t| !t.is_finite()) {
            bad("al.superloss_tau", format!("must be finite, got {tau}"));
        }
        if !(al.superloss_lambda > 0.0 && al.superloss_lambda.is_finite()) {
            bad("al.superloss_lambda", format!("must be positive, got {}", al.superloss_lambda));
        }

        let l = &al.learner;
        if l.epochs == 0 {
            bad("al.learner.epochs", "must be >= 1".into());
        }
        if l.batch_size == 0 {
            bad("al.learner.batch_size", "must be >= 1".into());
        }
        if !(l.learning_rate > 0.0 && l.learning_rate.is_finite()) {
            bad("al.learner.learning_rate", format!("must be positive, got {}", l.learning_rate));
        }
        if !(0.0..1.0).contains(&l.momentum) {
            bad("al.learner.momentum", format!("must lie in [0, 1), got {}", l.momentum));
        }
        if !(l.weight_decay >= 0.0 && l.weight_decay.is_finite()) {
            bad("al.learner.weight_decay", format!("must be >= 0, got {}", l.weight_decay));
        }
        if !(l.superloss_lambda > 0.0) {
            bad("al.learner.superloss_lambda", format!("must be positive, got {}", l.superloss_lambda));
        }

        if al.trustset.ensemble_size == 0 {
            bad("al.trustset.ensemble_size", "must be >= 1".into());
        }
        if al.trustset.size == Some(0) {
            bad("al.trustset.size", "must be >= 1".into());
        }

        let c = &al.cluster;
        if c.labeled_k == Some(0) {
            bad("al.cluster.labeled_k", "must be >= 1".into());
        }
        if c.unlabeled_k == Some(0) {
            bad("al.cluster.unlabeled_k", "must be >= 1".into());
        }
        if c.actions_per_cluster == 0 {
            bad("al.cluster.actions_per_cluster", "must be >= 1".into());
        }
        if c.max_iter == 0 {
            bad("al.cluster.max_iter", "must be >= 1".into());
        }
        if c.max_match_points == 0 {
            bad("al.cluster.max_match_points", "must be >= 1".into());
        }
        if !(c.tol >= 0.0) {
            bad("al.cluster.tol", format!("must be >= 0, got {}", c.tol));
        }

        let r = &al.rl;
        if r.n_env_pairs == 0 {
            bad("al.rl.n_env_pairs", "must be >= 1".into());
        }
        if r.steps_per_pair == 0 {
            bad("al.rl.steps_per_pair", "must be >= 1".into());
        }
        if r.batch_size == 0 {
            bad("al.rl.batch_size", "must be >= 1".into());
        }
        if !(r.env_labeled_fraction > 0.0 && r.env_labeled_fraction < 1.0) {
            bad(
                "al.rl.env_labeled_fraction",
                format!("must lie in (0, 1), got {}", r.env_labeled_fraction),
            );
        }
        if !(r.learning_rate > 0.0 && r.learning_rate.is_finite()) {
            bad("al.rl.learning_rate", format!("must be positive, got {}", r.learning_rate));
        }
        if r.hidden_width == 0 {
            bad("al.rl.hidden_width", "must be >= 1".into());
        }

        let t = &al.transport;
        if !(t.epsilon_scale > 0.0 && t.epsilon_scale.is_finite()) {
            bad("al.transport.epsilon_scale", format!("must be positive, got {}", t.epsilon_scale));
        }
        if t.max_iters == 0 {
            bad("al.transport.max_iters", "must be >= 1".into());
        }

        // Anything the library still rejects.
        if v.is_empty() {
            if let Err(e) = self.al_config(0).validate() {
                v.push(format!("al: {e}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(format!(
                "invalid config:\n  {}",
                v.join("\n  ")
            )))
        }
    }
}

impl DatasetBlock {
    /// Builds (or loads) the dataset and applies the imbalance profile.
    pub fn materialize(&self) -> Result<Dataset, CliError> {
        let base = match &self.source {
            DataSource::Generator {
                num_classes,
                dim,
                per_class,
                class_sep,
            } => gen_gaussian_mixture(*num_classes, *dim, *per_class, *class_sep, self.seed)?,
            DataSource::Csv { path, label_column } => load_csv(path, label_column)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
        };
        Ok(apply_imbalance(&base, &self.imbalance, self.seed)?)
    }
}
