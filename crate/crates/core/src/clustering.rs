//! K-means over learner features and the cluster structures used as RL
//! states (labeled/unlabeled clusters) and actions (groups within an
//! unlabeled cluster).

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::transport::{PointCloud, TransportConfig};
use crate::{derive_seed, rng_from, SampleId};

/// Feature vectors indexed by sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    pub fn get(&self, id: SampleId) -> &[f64] {
        &self.rows[id]
    }

    pub fn dim(&self) -> usize {
        self.rows.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn cloud(&self, ids: &[SampleId]) -> Result<PointCloud> {
        let rows: Vec<&[f64]> = ids.iter().map(|&id| self.get(id)).collect();
        PointCloud::from_rows(&rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Ascending ids.
    pub member_ids: Vec<SampleId>,
    pub centroid: Vec<f64>,
    pub mean: Vec<f64>,
    /// Per-dimension population variance.
    pub var: Vec<f64>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Clusters of the labeled set; `None` means the number of classes.
    pub labeled_k: Option<usize>,
    /// Clusters of the unlabeled pool; `None` means the number of classes.
    pub unlabeled_k: Option<usize>,
    pub actions_per_cluster: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Clouds are subsampled to at most this many points before matching
    /// labeled to unlabeled clusters.
    pub max_match_points: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            labeled_k: None,
            unlabeled_k: None,
            actions_per_cluster: 5,
            max_iter: 100,
            tol: 1e-6,
            max_match_points: 256,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled_k == Some(0) || self.unlabeled_k == Some(0) {
            return arg_err("cluster counts must be >= 1");
        }
        if self.actions_per_cluster == 0 {
            return arg_err("actions_per_cluster must be >= 1");
        }
        if self.max_match_points == 0 {
            return arg_err("max_match_points must be >= 1");
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-dimension mean and population variance (two-pass).
pub fn cluster_stats(members: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let dim = members.first().map_or(0, |m| m.len());
    let n = members.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for m in members {
        mean.iter_mut().zip(*m).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut var = vec![0.0; dim];
    for m in members {
        var.iter_mut()
            .zip(*m)
            .zip(&mean)
            .for_each(|((v, x), mu)| *v += (x - mu) * (x - mu));
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Result of [`kmeans_with_trace`].
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub clusters: Vec<Cluster>,
    /// Sum of squared distances to the assigned centroid after each
    /// assignment step.
    pub objective_trace: Vec<f64>,
}

/// Lloyd's k-means with k-means++ seeding. `ids` and `points` are parallel.
pub fn kmeans(
    ids: &[SampleId],
    points: &[&[f64]],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<Cluster>> {
    Ok(kmeans_with_trace(ids, points, k, seed, max_iter, tol)?.clusters)
}

pub fn kmeans_with_trace(
    ids: &[SampleId],
    points: &[&[f64]],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansRun> {
    let n = points.len();
    if ids.len() != n {
        return arg_err("ids and points differ in length");
    }
    if k == 0 || k > n {
        return arg_err(format!("k = {k} with {n} points"));
    }
    let mut rng = rng_from(seed, 20);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assign = vec![0usize; n];
    let mut trace = Vec::new();

    for _ in 0..max_iter.max(1) {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(&centroids, p).0;
        }
        repair_empty(points, &mut assign, &mut centroids);
        trace.push(objective(points, &assign, &centroids));

        let next = recompute(points, &assign, k, &centroids);
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    // Final assignment against the last centroids.
    for (a, p) in assign.iter_mut().zip(points) {
        *a = nearest(&centroids, p).0;
    }
    repair_empty(points, &mut assign, &mut centroids);
    trace.push(objective(points, &assign, &centroids));

    let mut clusters = Vec::with_capacity(k);
    for c in 0..k {
        let mut members: Vec<(SampleId, &[f64])> = assign
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == c)
            .map(|(i, _)| (ids[i], points[i]))
            .collect();
        members.sort_by_key(|m| m.0);
        let feats: Vec<&[f64]> = members.iter().map(|m| m.1).collect();
        let (mean, var) = cluster_stats(&feats);
        clusters.push(Cluster {
            member_ids: members.iter().map(|m| m.0).collect(),
            centroid: mean.clone(),
            mean,
            var,
        });
    }
    Ok(KMeansRun {
        clusters,
        objective_trace: trace,
    })
}

fn plus_plus_seeds(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if r < d {
                    pick = Some(i);
                    break;
                }
                r -= d;
            }
            // Rounding can exhaust r; fall back to the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // All remaining points coincide with a center.
            (0..n).find(|&i| !chosen[i]).unwrap()
        };
        chosen[pick] = true;
        centroids.push(points[pick].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[pick]));
        }
    }
    centroids
}

/// (index, squared distance) of the nearest centroid; ties to the lowest index.
fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Empty clusters take the point farthest from its own centroid (drawn from
/// clusters with more than one member).
fn repair_empty(points: &[&[f64]], assign: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if sizes[assign[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assign[i]]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { return };
        assign[i] = empty;
        centroids[empty] = points[i].to_vec();
    }
}

fn objective(points: &[&[f64]], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn recompute(points: &[&[f64]], assign: &[usize], k: usize, old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        sums[a].iter_mut().zip(*p).for_each(|(s, x)| *s += x);
    }
    sums.into_iter()
        .zip(counts)
        .zip(old)
        .map(|((s, c), o)| {
            if c == 0 {
                o.clone()
            } else {
                s.into_iter().map(|x| x / c as f64).collect()
            }
        })
        .collect()
}

/// Clusters the given ids by their features with `k = min(k, |ids|)`.
pub fn cluster_ids(
    ids: &[SampleId],
    features: &FeatureTable,
    k: usize,
    seed: u64,
    cfg: &ClusterConfig,
) -> Result<Vec<Cluster>> {
    let points: Vec<&[f64]> = ids.iter().map(|&id| features.get(id)).collect();
    kmeans(ids, &points, k.min(ids.len()), seed, cfg.max_iter, cfg.tol)
}

/// Candidate actions: k-means inside an unlabeled cluster with
/// `k = min(actions_per_cluster, |members|)`.
pub fn action_groups(
    cluster: &Cluster,
    features: &FeatureTable,
    actions_per_cluster: usize,
    seed: u64,
    cfg: &ClusterConfig,
) -> Result<Vec<Cluster>> {
    if actions_per_cluster == 0 {
        return arg_err("actions_per_cluster must be >= 1");
    }
    cluster_ids(&cluster.member_ids, features, actions_per_cluster, seed, cfg)
}

/// Seeded subsample of at most `max` ids (all of them, in order, otherwise).
pub fn subsample(ids: &[SampleId], max: usize, seed: u64) -> Vec<SampleId> {
    if ids.len() <= max {
        return ids.to_vec();
    }
    let mut rng = rng_from(seed, 21);
    let mut picked: Vec<usize> = sample_indices(&mut rng, ids.len(), max).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| ids[i]).collect()
}

/// Index of the labeled cluster with the smallest Wasserstein distance to
/// `target`; ties to the lowest index. Returns the distance too.
pub fn nearest_labeled_cluster(
    target: &Cluster,
    labeled: &[Cluster],
    features: &FeatureTable,
    max_points: usize,
    seed: u64,
    transport: &TransportConfig,
) -> Result<(usize, f64)> {
    if labeled.is_empty() {
        return arg_err("no labeled clusters");
    }
    let tcloud = features.cloud(&subsample(&target.member_ids, max_points, seed))?;
    let mut best = (0, f64::INFINITY);
    for (m, cl) in labeled.iter().enumerate() {
        let cloud = features.cloud(&subsample(&cl.member_ids, max_points, derive_seed(seed, m as u64, 1)))?;
        let d = transport.distance(&cloud, &tcloud)?;
        if d < best.1 {
            best = (m, d);
        }
    }
    Ok(best)
}
