//! Reward-regression policy.
//!
//! Episodes are single-step, so the Q-function coincides with the reward
//! function and training reduces to regressing the reward network on
//! `(state, action, reward)` transitions harvested from simulated splits of
//! the labeled set.
//!
//! A state is `[E[L*], Var[L*], E[U_c], Var[U_c]]`, where `U_c` is a cluster
//! of the (simulated) unlabeled pool and `L*` the labeled cluster closest to
//! it in Wasserstein distance. An action is `[E[g], Var[g]]` for a k-means
//! group `g` inside `U_c`. The reward is `-W(g, T_c)` with `T_c` the part of
//! the TrustSet that falls inside `U_c`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    action_groups, cluster_ids, nearest_labeled_cluster, Cluster, ClusterConfig, FeatureTable,
};
use crate::error::{arg_err, Error, Result};
use crate::transport::TransportConfig;
use crate::{derive_seed, rng_from, SampleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionOrder {
    /// All groups of all clusters ranked together.
    #[default]
    Global,
    /// Clusters take turns contributing their next-best group.
    PerClusterRoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RLConfig {
    pub n_env_pairs: usize,
    /// Share of the labeled set used as the simulated labeled part.
    pub env_labeled_fraction: f64,
    pub steps_per_pair: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Z-score reward-net inputs with statistics of the replay buffer and
    /// start the output at the buffer's mean reward.
    pub standardize_inputs: bool,
    /// Attempts per environment pair when a split yields no transitions.
    pub max_resamples: usize,
    pub selection_order: SelectionOrder,
    pub seed: u64,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            n_env_pairs: 30,
            env_labeled_fraction: 0.2,
            steps_per_pair: 20,
            batch_size: 100,
            learning_rate: 0.01,
            hidden_width: 512,
            hidden_layers: 2,
            standardize_inputs: true,
            max_resamples: 5,
            selection_order: SelectionOrder::Global,
            seed: 0,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_env_pairs == 0 || self.batch_size == 0 {
            return arg_err("n_env_pairs and batch_size must be positive");
        }
        if !(self.env_labeled_fraction > 0.0 && self.env_labeled_fraction < 1.0) {
            return arg_err(format!(
                "env_labeled_fraction must lie in (0, 1), got {}",
                self.env_labeled_fraction
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return arg_err("learning_rate must be positive");
        }
        if self.hidden_width == 0 {
            return arg_err("hidden_width must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

impl Transition {
    pub fn input(&self) -> Vec<f64> {
        let mut v = self.state.clone();
        v.extend_from_slice(&self.action);
        v
    }
}

/// Transitions of one active-learning round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    transitions: Vec<Transition>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        self.transitions.extend(ts);
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Uniform batch: without replacement when the buffer is large enough,
    /// with replacement otherwise.
    pub fn sample_batch(&self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        let n = self.len();
        if n >= size {
            sample_indices(rng, n, size).into_vec()
        } else {
            (0..size).map(|_| rng.random_range(0..n)).collect()
        }
    }

    fn matrices(&self, idx: &[usize]) -> (Array2<f64>, Array1<f64>) {
        let width = self.transitions[0].state.len() + self.transitions[0].action.len();
        let mut x = Array2::zeros((idx.len(), width));
        let mut y = Array1::zeros(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            let t = &self.transitions[i];
            let mut row = x.row_mut(r);
            for (dst, src) in row.iter_mut().zip(t.state.iter().chain(&t.action)) {
                *dst = *src;
            }
            y[r] = t.reward;
        }
        (x, y)
    }

    /// Mean squared error of `model` over the whole buffer.
    pub fn mse(&self, model: &RewardNet) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let idx: Vec<usize> = (0..self.len()).collect();
        let (x, y) = self.matrices(&idx);
        let pred = model.predict_batch(&x);
        (&pred - &y).mapv(|e| e * e).mean().unwrap_or(0.0)
    }

    /// Debug dump: `s0..,a0..,reward`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if let Some(t) = self.transitions.first() {
            let mut header: Vec<String> = (0..t.state.len()).map(|i| format!("s{i}")).collect();
            header.extend((0..t.action.len()).map(|i| format!("a{i}")));
            header.push("reward".into());
            writeln!(f, "{}", header.join(","))?;
        }
        for t in &self.transitions {
            let row: Vec<String> = t
                .state
                .iter()
                .chain(&t.action)
                .chain(std::iter::once(&t.reward))
                .map(|v| format!("{v:?}"))
                .collect();
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Anything that scores a `state ‖ action` vector.
pub trait RewardModel: Sync {
    fn predict(&self, input: &[f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `in x out`
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Fully connected ReLU regressor with a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardNet {
    layers: Vec<Dense>,
    shift: Array1<f64>,
    scale: Array1<f64>,
}

impl RewardNet {
    /// Hidden weights uniform in `[-sqrt(3/fan_in), sqrt(3/fan_in)]` (unit
    /// variance per fan-in), zero biases, and a zero output layer so training
    /// starts from a constant prediction.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = rng_from(seed, 30);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        let mut layers: Vec<Dense> = dims
            .windows(2)
            .map(|w| {
                let bound = (3.0 / w[0] as f64).sqrt();
                Dense {
                    w: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        let top = *dims.last().unwrap();
        layers.push(Dense {
            w: Array2::zeros((top, 1)),
            b: Array1::zeros(1),
        });
        Self {
            layers,
            shift: Array1::zeros(input_dim),
            scale: Array1::ones(input_dim),
        }
    }

    pub fn from_config(input_dim: usize, cfg: &RLConfig, seed: u64) -> Self {
        Self::new(input_dim, &vec![cfg.hidden_width; cfg.hidden_layers], seed)
    }

    pub fn input_dim(&self) -> usize {
        self.shift.len()
    }

    /// Sets the input standardization from the rows of `x`; constant columns
    /// keep unit scale.
    pub fn fit_standardizer(&mut self, x: &Array2<f64>) {
        if x.nrows() == 0 {
            return;
        }
        self.shift = x.mean_axis(Axis(0)).unwrap();
        let sd = x.std_axis(Axis(0), 0.0);
        self.scale = sd.mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
    }

    pub fn set_output_bias(&mut self, bias: f64) {
        let last = self.layers.len() - 1;
        self.layers[last].b[0] = bias;
    }

    fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.shift) * &self.scale
    }

    /// Pre-activations of every layer for a batch.
    fn forward(&self, x: &Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut acts = vec![self.normalize(x)];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.w) + &layer.b;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        let out = acts.pop().unwrap();
        (acts, out)
    }

    pub fn predict_batch(&self, x: &Array2<f64>) -> Array1<f64> {
        self.forward(x).1.column(0).to_owned()
    }

    /// One SGD step on the mean squared error; returns the loss before the step.
    pub fn train_step(&mut self, x: &Array2<f64>, y: &Array1<f64>, lr: f64) -> f64 {
        let (acts, out) = self.forward(x);
        let n = x.nrows() as f64;
        let err = &out.column(0) - y;
        let loss = err.mapv(|e| e * e).sum() / n;
        let mut delta = (err * (2.0 / n)).insert_axis(Axis(1));
        for l in (0..self.layers.len()).rev() {
            let a = &acts[l];
            let gw = a.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut next = delta.dot(&self.layers[l].w.t());
                next.zip_mut_with(a, |d, &act| {
                    if act <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = next;
            }
            let layer = &mut self.layers[l];
            layer.w.scaled_add(-lr, &gw);
            layer.b.scaled_add(-lr, &gb);
        }
        loss
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

impl RewardModel for RewardNet {
    fn predict(&self, input: &[f64]) -> f64 {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .expect("input row has a consistent shape");
        self.predict_batch(&x)[0]
    }
}

/// Predicted reward of `action` in `state`.
pub fn predict_reward(model: &dyn RewardModel, state: &[f64], action: &[f64]) -> f64 {
    let mut input = state.to_vec();
    input.extend_from_slice(action);
    model.predict(&input)
}

fn state_vector(labeled: &Cluster, unlabeled: &Cluster) -> Vec<f64> {
    let mut s = labeled.mean.clone();
    s.extend_from_slice(&labeled.var);
    s.extend_from_slice(&unlabeled.mean);
    s.extend_from_slice(&unlabeled.var);
    s
}

fn action_vector(group: &Cluster) -> Vec<f64> {
    let mut a = group.mean.clone();
    a.extend_from_slice(&group.var);
    a
}

/// An unlabeled cluster with its matched labeled cluster and action groups.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub cluster: Cluster,
    pub nearest_labeled: usize,
    pub state: Vec<f64>,
    pub groups: Vec<Cluster>,
}

/// Shared knobs for building states from features.
#[derive(Debug, Clone, Copy)]
pub struct StateContext<'a> {
    pub features: &'a FeatureTable,
    pub num_classes: usize,
    pub cluster: &'a ClusterConfig,
    pub transport: &'a TransportConfig,
}

/// Clusters both sides and builds a [`ClusterState`] for every unlabeled
/// cluster accepted by `keep`.
pub fn cluster_states(
    labeled_ids: &[SampleId],
    unlabeled_ids: &[SampleId],
    ctx: &StateContext<'_>,
    seed: u64,
    keep: impl Fn(&Cluster) -> bool,
) -> Result<Vec<ClusterState>> {
    let m = ctx.cluster.labeled_k.unwrap_or(ctx.num_classes);
    let c = ctx.cluster.unlabeled_k.unwrap_or(ctx.num_classes);
    let labeled = cluster_ids(labeled_ids, ctx.features, m, derive_seed(seed, 1, 0), ctx.cluster)?;
    let unlabeled =
        cluster_ids(unlabeled_ids, ctx.features, c, derive_seed(seed, 2, 0), ctx.cluster)?;
    let mut out = Vec::new();
    for (ci, u) in unlabeled.into_iter().enumerate() {
        if !keep(&u) {
            continue;
        }
        let (nearest, _) = nearest_labeled_cluster(
            &u,
            &labeled,
            ctx.features,
            ctx.cluster.max_match_points,
            derive_seed(seed, 3, ci as u64),
            ctx.transport,
        )?;
        let groups = action_groups(
            &u,
            ctx.features,
            ctx.cluster.actions_per_cluster,
            derive_seed(seed, 4, ci as u64),
            ctx.cluster,
        )?;
        out.push(ClusterState {
            state: state_vector(&labeled[nearest], &u),
            nearest_labeled: nearest,
            cluster: u,
            groups,
        });
    }
    Ok(out)
}

/// Random split of the labeled set into a simulated labeled part of
/// `round(env_labeled_fraction * |L|)` ids and a simulated pool. Both parts
/// are returned sorted.
pub fn env_split(
    labeled_ids: &[SampleId],
    rl: &RLConfig,
    pair_seed: u64,
) -> Result<(Vec<SampleId>, Vec<SampleId>)> {
    let n = labeled_ids.len();
    let n_env_labeled = ((rl.env_labeled_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    if n_env_labeled == 0 || n_env_labeled >= n {
        return arg_err(format!("labeled set of {n} is too small to split into an environment"));
    }
    let mut shuffled = labeled_ids.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(&mut rng_from(pair_seed, 31));
    let mut env_l = shuffled[..n_env_labeled].to_vec();
    let mut env_u = shuffled[n_env_labeled..].to_vec();
    env_l.sort_unstable();
    env_u.sort_unstable();
    Ok((env_l, env_u))
}

/// Transitions of one environment with a given split: a transition for every
/// action group of every simulated pool cluster that intersects the TrustSet.
pub fn split_transitions(
    env_labeled: &[SampleId],
    env_unlabeled: &[SampleId],
    trustset: &BTreeSet<SampleId>,
    ctx: &StateContext<'_>,
    seed: u64,
) -> Result<Vec<Transition>> {
    let states = cluster_states(env_labeled, env_unlabeled, ctx, seed, |u| {
        u.member_ids.iter().any(|id| trustset.contains(id))
    })?;
    let mut out = Vec::new();
    for st in states {
        let target: Vec<SampleId> = st
            .cluster
            .member_ids
            .iter()
            .copied()
            .filter(|id| trustset.contains(id))
            .collect();
        let target_cloud = ctx.features.cloud(&target)?;
        for g in &st.groups {
            let d = ctx.transport.distance(&ctx.features.cloud(&g.member_ids)?, &target_cloud)?;
            out.push(Transition {
                state: st.state.clone(),
                action: action_vector(g),
                reward: -d,
            });
        }
    }
    Ok(out)
}

/// One simulated environment: [`env_split`] followed by
/// [`split_transitions`].
pub fn build_env_transitions(
    labeled_ids: &[SampleId],
    trustset: &BTreeSet<SampleId>,
    ctx: &StateContext<'_>,
    rl: &RLConfig,
    pair_seed: u64,
) -> Result<Vec<Transition>> {
    let (env_l, env_u) = env_split(labeled_ids, rl, pair_seed)?;
    split_transitions(&env_l, &env_u, trustset, ctx, pair_seed)
}

/// Runs `steps` SGD steps on uniformly sampled batches of `buffer`.
fn sgd_steps(net: &mut RewardNet, buffer: &ReplayBuffer, steps: usize, rl: &RLConfig, rng: &mut impl Rng) -> Result<f64> {
    let mut last = f64::NAN;
    for _ in 0..steps {
        let idx = buffer.sample_batch(rl.batch_size, rng);
        let (x, y) = buffer.matrices(&idx);
        last = net.train_step(&x, &y, rl.learning_rate);
        if !last.is_finite() || !net.is_finite() {
            return Err(Error::Numeric("reward network diverged".into()));
        }
    }
    Ok(last)
}

fn fit_standardizer(net: &mut RewardNet, buffer: &ReplayBuffer, rl: &RLConfig) {
    if rl.standardize_inputs && !buffer.is_empty() {
        let idx: Vec<usize> = (0..buffer.len()).collect();
        let (x, y) = buffer.matrices(&idx);
        net.fit_standardizer(&x);
        net.set_output_bias(y.mean().unwrap_or(0.0));
    }
}

/// Trains on a fixed buffer for `n_env_pairs * steps_per_pair` steps.
pub fn train_reward_net(mut net: RewardNet, buffer: &ReplayBuffer, rl: &RLConfig) -> Result<RewardNet> {
    rl.validate()?;
    if buffer.is_empty() {
        return arg_err("cannot train on an empty replay buffer");
    }
    fit_standardizer(&mut net, buffer, rl);
    let mut rng = rng_from(rl.seed, 32);
    sgd_steps(&mut net, buffer, rl.n_env_pairs * rl.steps_per_pair, rl, &mut rng)?;
    Ok(net)
}

/// Outcome of [`train_policy`].
#[derive(Debug, Clone)]
pub struct PolicyTraining {
    pub net: RewardNet,
    pub buffer: ReplayBuffer,
    /// Environment pairs that produced no transitions after all resamples.
    pub empty_pairs: usize,
    pub final_mse: f64,
}

/// One round of policy learning: a fresh replay buffer and network; for each
/// environment pair the buffer grows by that pair's transitions and the
/// network takes `steps_per_pair` steps on it.
///
/// Environments do not depend on the network, so they are generated up front
/// (in parallel) and replayed in order.
pub fn train_policy(
    labeled_ids: &[SampleId],
    trustset: &BTreeSet<SampleId>,
    ctx: &StateContext<'_>,
    rl: &RLConfig,
) -> Result<PolicyTraining> {
    rl.validate()?;
    if trustset.is_empty() {
        return arg_err("empty TrustSet");
    }
    let envs: Vec<(Vec<Transition>, bool)> = (0..rl.n_env_pairs)
        .into_par_iter()
        .map(|pair| {
            for attempt in 0..=rl.max_resamples {
                let seed = derive_seed(rl.seed, pair as u64, attempt as u64);
                let ts = build_env_transitions(labeled_ids, trustset, ctx, rl, seed)?;
                if !ts.is_empty() {
                    return Ok((ts, false));
                }
            }
            Ok((Vec::new(), true))
        })
        .collect::<Result<_>>()?;

    let input_dim = 6 * ctx.features.dim();
    let mut net = RewardNet::from_config(input_dim, rl, derive_seed(rl.seed, 99, 0));
    let mut all = ReplayBuffer::new();
    for (ts, _) in &envs {
        all.extend(ts.iter().cloned());
    }
    fit_standardizer(&mut net, &all, rl);

    let mut buffer = ReplayBuffer::new();
    let mut rng = rng_from(rl.seed, 33);
    let mut empty_pairs = 0;
    for (ts, empty) in envs {
        empty_pairs += usize::from(empty);
        buffer.extend(ts);
        if !buffer.is_empty() {
            sgd_steps(&mut net, &buffer, rl.steps_per_pair, rl, &mut rng)?;
        }
    }
    let final_mse = buffer.mse(&net);
    Ok(PolicyTraining {
        net,
        buffer,
        empty_pairs,
        final_mse,
    })
}

/// Members ordered by distance to the group centroid, ties by id.
fn centroid_order(group: &Cluster, features: &FeatureTable) -> Vec<SampleId> {
    let mut m: Vec<(f64, SampleId)> = group
        .member_ids
        .iter()
        .map(|&id| {
            let d: f64 = features
                .get(id)
                .iter()
                .zip(&group.centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d, id)
        })
        .collect();
    m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    m.into_iter().map(|(_, id)| id).collect()
}

/// Scores every action group of the real unlabeled pool and fills a batch of
/// `b` ids in descending predicted reward.
pub fn select_batch(
    model: &dyn RewardModel,
    labeled_ids: &[SampleId],
    unlabeled_ids: &[SampleId],
    b: usize,
    ctx: &StateContext<'_>,
    order: SelectionOrder,
    seed: u64,
) -> Result<Vec<SampleId>> {
    if b > unlabeled_ids.len() {
        return arg_err(format!("batch of {b} from a pool of {}", unlabeled_ids.len()));
    }
    if b == 0 {
        return Ok(Vec::new());
    }
    let states = cluster_states(labeled_ids, unlabeled_ids, ctx, seed, |_| true)?;
    // (cluster, group, reward)
    let mut scored: Vec<(usize, usize, f64)> = states
        .par_iter()
        .enumerate()
        .flat_map_iter(|(ci, st)| {
            st.groups
                .iter()
                .enumerate()
                .map(move |(gi, g)| (ci, gi, predict_reward(model, &st.state, &action_vector(g))))
        })
        .collect();
    let rank = |a: &(usize, usize, f64), b: &(usize, usize, f64)| {
        b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    };
    scored.sort_by(rank);
    let ordered: Vec<(usize, usize)> = match order {
        SelectionOrder::Global => scored.iter().map(|s| (s.0, s.1)).collect(),
        SelectionOrder::PerClusterRoundRobin => {
            // Round r holds every cluster's r-th best group, itself in
            // descending reward.
            let mut round_of = vec![0usize; scored.len()];
            let mut seen = vec![0usize; states.len()];
            for (i, s) in scored.iter().enumerate() {
                round_of[i] = seen[s.0];
                seen[s.0] += 1;
            }
            let mut idx: Vec<usize> = (0..scored.len()).collect();
            idx.sort_by_key(|&i| round_of[i]);
            idx.into_iter().map(|i| (scored[i].0, scored[i].1)).collect()
        }
    };

    let mut out = Vec::with_capacity(b);
    for (ci, gi) in ordered {
        let members = centroid_order(&states[ci].groups[gi], ctx.features);
        let take = (b - out.len()).min(members.len());
        out.extend_from_slice(&members[..take]);
        if out.len() == b {
            break;
        }
    }
    Ok(out)
}
