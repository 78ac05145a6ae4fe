//! Query strategies: the TrustSet-guided reward policy, its ablations, and
//! the baselines.
//!
//! Strategies never see a [`Dataset`]. They get inputs and learner features
//! by id, and labels only through [`LabelAccess`], which refuses reads of
//! unlabeled-pool labels unless the strategy is the ground-truth oracle.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;

use crate::clustering::{ClusterConfig, FeatureTable};
use crate::dataset::{Dataset, Sample};
use crate::error::{arg_err, Error, Result};
use crate::learner::{argmax, predict_proba, ModelParams};
use crate::rl::{select_batch, train_policy, RLConfig, StateContext};
use crate::transport::TransportConfig;
use crate::trustset::{
    el2n, extract_trustset, score_samples, second_best_trustset, select_balanced,
    SuperLossConfig, TrustSetConfig,
};
use crate::{rng_from, SampleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// TrustSet-guided reward policy.
    Bralt,
    /// Same, with the second-best group per class as the target set.
    BraltDiffSet,
    /// Same, with plain EL2N (no curriculum weighting).
    BraltNoCl,
    Random,
    Entropy,
    Margin,
    /// k-center greedy on learner features.
    CoreSet,
    /// Top EL2N against the model's own argmax labels.
    PseudoScore,
    /// Class-balanced top scores using the true labels of the pool.
    GradNdOracle,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Bralt,
        Strategy::BraltDiffSet,
        Strategy::BraltNoCl,
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Margin,
        Strategy::CoreSet,
        Strategy::PseudoScore,
        Strategy::GradNdOracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Bralt => "bralt",
            Self::BraltDiffSet => "bralt-diffset",
            Self::BraltNoCl => "bralt-no-cl",
            Self::Random => "random",
            Self::Entropy => "entropy",
            Self::Margin => "margin",
            Self::CoreSet => "coreset",
            Self::PseudoScore => "pseudo-score",
            Self::GradNdOracle => "gradnd-oracle",
        }
    }

    /// Whether the strategy may read labels of the unlabeled pool.
    pub fn reads_pool_labels(&self) -> bool {
        matches!(self, Self::GradNdOracle)
    }

    pub fn uses_policy(&self) -> bool {
        matches!(self, Self::Bralt | Self::BraltDiffSet | Self::BraltNoCl)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown strategy {s:?}")))
    }
}

/// Label reads, gated by pool membership.
pub struct LabelAccess<'a> {
    dataset: &'a Dataset,
    unlabeled: &'a BTreeSet<SampleId>,
    allow_pool: bool,
    pool_reads: AtomicUsize,
}

impl<'a> LabelAccess<'a> {
    pub fn new(dataset: &'a Dataset, unlabeled: &'a BTreeSet<SampleId>, allow_pool: bool) -> Self {
        Self {
            dataset,
            unlabeled,
            allow_pool,
            pool_reads: AtomicUsize::new(0),
        }
    }

    pub fn label(&self, id: SampleId) -> Result<usize> {
        if self.unlabeled.contains(&id) {
            if !self.allow_pool {
                return arg_err(format!("label of unlabeled sample {id} requested"));
            }
            self.pool_reads.fetch_add(1, Ordering::Relaxed);
        }
        Ok(self.dataset.get(id).label)
    }

    /// Number of unlabeled-pool labels handed out.
    pub fn pool_reads(&self) -> usize {
        self.pool_reads.load(Ordering::Relaxed)
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }
}

/// Everything a strategy may look at in one round.
pub struct SelectionContext<'a> {
    /// Raw inputs by id.
    pub inputs: &'a FeatureTable,
    /// Penultimate learner features by id.
    pub features: &'a FeatureTable,
    /// Models trained on the current labeled set (first one is the main model).
    pub ensemble: &'a [ModelParams],
    pub labeled: &'a [SampleId],
    pub unlabeled: &'a [SampleId],
    pub labels: &'a LabelAccess<'a>,
    pub batch: usize,
    pub seed: u64,
    pub policy: PolicySettings<'a>,
}

/// Settings used by the policy-based strategies and the oracle.
#[derive(Clone, Copy)]
pub struct PolicySettings<'a> {
    pub trustset: &'a TrustSetConfig,
    pub superloss: &'a SuperLossConfig,
    pub cluster: &'a ClusterConfig,
    pub rl: &'a RLConfig,
    pub transport: &'a TransportConfig,
}

/// Per-round information reported by a strategy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionInfo {
    pub trustset_class_counts: Option<Vec<usize>>,
    pub buffer_size: Option<usize>,
    pub reward_mse: Option<f64>,
    pub empty_env_pairs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub ids: Vec<SampleId>,
    pub info: SelectionInfo,
}

impl Selection {
    fn plain(ids: Vec<SampleId>) -> Self {
        Self {
            ids,
            info: SelectionInfo::default(),
        }
    }
}

pub fn select(strategy: Strategy, ctx: &SelectionContext<'_>) -> Result<Selection> {
    if ctx.batch > ctx.unlabeled.len() {
        return arg_err(format!(
            "batch of {} from a pool of {}",
            ctx.batch,
            ctx.unlabeled.len()
        ));
    }
    match strategy {
        Strategy::Random => Ok(Selection::plain(random(ctx))),
        Strategy::Entropy => scored_top(ctx, |p| -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()),
        Strategy::Margin => scored_top(ctx, |p| {
            let mut s = p.to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            -(s[0] - s.get(1).copied().unwrap_or(0.0))
        }),
        Strategy::CoreSet => Ok(Selection::plain(k_center_greedy(
            ctx.features,
            ctx.labeled,
            ctx.unlabeled,
            ctx.batch,
        ))),
        Strategy::PseudoScore => pseudo_score(ctx),
        Strategy::GradNdOracle => gradnd_oracle(ctx),
        Strategy::Bralt | Strategy::BraltDiffSet | Strategy::BraltNoCl => policy_select(strategy, ctx),
    }
}

fn random(ctx: &SelectionContext<'_>) -> Vec<SampleId> {
    let mut pool = ctx.unlabeled.to_vec();
    pool.shuffle(&mut rng_from(ctx.seed, 40));
    pool.truncate(ctx.batch);
    pool
}

/// Top-`batch` by `score(probs)`, ties broken by a seeded permutation.
fn scored_top(ctx: &SelectionContext<'_>, score: impl Fn(&[f64]) -> f64) -> Result<Selection> {
    let mut tiebreak: Vec<usize> = (0..ctx.unlabeled.len()).collect();
    tiebreak.shuffle(&mut rng_from(ctx.seed, 41));
    let mut scored = Vec::with_capacity(ctx.unlabeled.len());
    for (i, &id) in ctx.unlabeled.iter().enumerate() {
        let p = predict_proba(&ctx.ensemble[0], ctx.inputs.get(id))?;
        scored.push((score(&p), tiebreak[i], id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(Selection::plain(scored.into_iter().take(ctx.batch).map(|s| s.2).collect()))
}

/// Farthest-first traversal seeded with the labeled set; ties to the lowest id.
pub fn k_center_greedy(
    features: &FeatureTable,
    labeled: &[SampleId],
    unlabeled: &[SampleId],
    batch: usize,
) -> Vec<SampleId> {
    let dist = |a: SampleId, b: SampleId| crate::transport::euclidean(features.get(a), features.get(b));
    let mut pool: Vec<SampleId> = unlabeled.to_vec();
    pool.sort_unstable();
    let mut min_d: Vec<f64> = pool
        .iter()
        .map(|&u| labeled.iter().map(|&l| dist(u, l)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(batch);
    while out.len() < batch.min(pool.len()) {
        let mut best: Option<usize> = None;
        for i in 0..pool.len() {
            if !taken[i] && best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        taken[b] = true;
        out.push(pool[b]);
        for i in 0..pool.len() {
            if !taken[i] {
                min_d[i] = min_d[i].min(dist(pool[i], pool[b]));
            }
        }
    }
    out
}

fn pseudo_score(ctx: &SelectionContext<'_>) -> Result<Selection> {
    let mut scored = Vec::with_capacity(ctx.unlabeled.len());
    for &id in ctx.unlabeled {
        let p = predict_proba(&ctx.ensemble[0], ctx.inputs.get(id))?;
        scored.push((el2n(&p, argmax(&p)), id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(Selection::plain(scored.into_iter().take(ctx.batch).map(|s| s.1).collect()))
}

fn samples_with_labels(ctx: &SelectionContext<'_>, ids: &[SampleId]) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|&id| {
            Ok(Sample {
                id,
                features: ctx.inputs.get(id).to_vec(),
                label: ctx.labels.label(id)?,
            })
        })
        .collect()
}

fn gradnd_oracle(ctx: &SelectionContext<'_>) -> Result<Selection> {
    if ctx.batch == 0 {
        return Ok(Selection::plain(Vec::new()));
    }
    let pool = samples_with_labels(ctx, ctx.unlabeled)?;
    let refs: Vec<&Sample> = pool.iter().collect();
    let sl = ctx.policy.trustset.use_curriculum.then_some(ctx.policy.superloss);
    let scored = score_samples(&refs, ctx.ensemble, sl)?;
    let picked = select_balanced(&scored, ctx.labels.num_classes(), ctx.batch, false)?;
    Ok(Selection {
        info: SelectionInfo {
            trustset_class_counts: Some(picked.per_class_counts.clone()),
            ..Default::default()
        },
        ids: picked.ids,
    })
}

fn policy_select(strategy: Strategy, ctx: &SelectionContext<'_>) -> Result<Selection> {
    let p = ctx.policy;
    let labeled = samples_with_labels(ctx, ctx.labeled)?;
    let refs: Vec<&Sample> = labeled.iter().collect();
    let trust = match strategy {
        Strategy::BraltDiffSet => second_best_trustset(&refs, ctx.ensemble, p.trustset, p.superloss)?,
        Strategy::BraltNoCl => {
            let cfg = TrustSetConfig {
                use_curriculum: false,
                ..p.trustset.clone()
            };
            extract_trustset(&refs, ctx.ensemble, &cfg, p.superloss)?
        }
        _ => extract_trustset(&refs, ctx.ensemble, p.trustset, p.superloss)?,
    };
    let trust_ids: BTreeSet<SampleId> = trust.ids.iter().copied().collect();
    let state_ctx = StateContext {
        features: ctx.features,
        num_classes: ctx.labels.num_classes(),
        cluster: p.cluster,
        transport: p.transport,
    };
    let rl = RLConfig {
        seed: ctx.seed,
        ..p.rl.clone()
    };
    let trained = train_policy(ctx.labeled, &trust_ids, &state_ctx, &rl)?;
    let ids = select_batch(
        &trained.net,
        ctx.labeled,
        ctx.unlabeled,
        ctx.batch,
        &state_ctx,
        rl.selection_order,
        ctx.seed,
    )?;
    Ok(Selection {
        ids,
        info: SelectionInfo {
            trustset_class_counts: Some(trust.per_class_counts),
            buffer_size: Some(trained.buffer.len()),
            reward_mse: Some(trained.final_mse),
            empty_env_pairs: Some(trained.empty_pairs),
        },
    })
}
