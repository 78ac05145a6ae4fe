//! TrustSet extraction: EL2N importance scores, SuperLoss curriculum weights,
//! and class-balanced top-N selection over the labeled set.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{arg_err, Error, Result};
use crate::learner::{cross_entropy, predict_proba, ModelParams};
use crate::SampleId;

/// Bounds of the SuperLoss weight.
pub const SIGMA_MIN: f64 = 1e-6;
pub const SIGMA_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperLossConfig {
    /// Easy/hard threshold on the task loss.
    pub tau: f64,
    /// Regularization weight; larger values pull the weight towards one.
    pub lambda: f64,
}

impl SuperLossConfig {
    /// `tau = ln(num_classes)`.
    pub fn for_classes(num_classes: usize, lambda: f64) -> Self {
        Self {
            tau: (num_classes as f64).ln(),
            lambda,
        }
    }

    /// `(loss - tau) * sigma + lambda * ln(sigma)^2`
    pub fn objective(&self, loss: f64, sigma: f64) -> f64 {
        let l = sigma.ln();
        (loss - self.tau) * sigma + self.lambda * l * l
    }
}

/// Minimizer of `(loss - tau) * sigma + lambda * ln(sigma)^2` over
/// `sigma in [SIGMA_MIN, SIGMA_MAX]`.
///
/// In `s = ln(sigma)` the derivative is `h(s) = beta * e^s + 2 * lambda * s`
/// with `beta = loss - tau`. For `beta >= 0`, `h` is increasing and its root
/// is the only interior candidate. For `beta < 0`, `h` rises up to
/// `s0 = ln(2 * lambda / -beta)` and falls after it, so only the root left of
/// `s0` can be a local minimum; the objective is unbounded below as
/// `sigma -> inf`, which makes the upper bound a candidate too. Candidates are
/// compared by objective value, ties to the smaller sigma.
pub fn superloss_sigma(loss: f64, cfg: &SuperLossConfig) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    if !(cfg.lambda > 0.0 && cfg.lambda.is_finite() && cfg.tau.is_finite()) {
        return arg_err(format!("invalid superloss config {cfg:?}"));
    }
    let beta = loss - cfg.tau;
    if beta == 0.0 {
        return Ok(1.0);
    }
    let lam = cfg.lambda;
    let (s_lo, s_hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let h = |s: f64| beta * s.exp() + 2.0 * lam * s;

    let mut candidates = vec![s_lo, s_hi];
    let right = if beta > 0.0 {
        s_hi
    } else {
        (2.0 * lam / -beta).ln().min(s_hi)
    };
    if right > s_lo && h(s_lo) < 0.0 && h(right) > 0.0 {
        candidates.push(bisect_root(h, s_lo, right));
    }

    let mut best = candidates[0];
    let mut best_val = cfg.objective(loss, best.exp());
    for &s in &candidates[1..] {
        let v = cfg.objective(loss, s.exp());
        if v < best_val || (v == best_val && s < best) {
            best = s;
            best_val = v;
        }
    }
    Ok(best.exp().clamp(SIGMA_MIN, SIGMA_MAX))
}

/// Root of an increasing function with `f(lo) < 0 < f(hi)`, bisected until
/// the bracket stops shrinking.
fn bisect_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return mid;
        }
        let v = f(mid);
        if v == 0.0 {
            return mid;
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// `|| probs - onehot(label) ||_2`
pub fn el2n(probs: &[f64], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let t = if k == label { 1.0 } else { 0.0 };
            (p - t) * (p - t)
        })
        .sum::<f64>()
        .sqrt()
}

fn check_ensemble(ensemble: &[ModelParams]) -> Result<()> {
    if ensemble.is_empty() {
        return arg_err("empty model ensemble");
    }
    Ok(())
}

/// Mean EL2N of `(features, label)` over the ensemble members.
pub fn el2n_score(ensemble: &[ModelParams], features: &[f64], label: usize) -> Result<f64> {
    Ok(score_parts(ensemble, features, label)?.0)
}

/// (mean EL2N, mean cross-entropy) over the ensemble.
fn score_parts(ensemble: &[ModelParams], features: &[f64], label: usize) -> Result<(f64, f64)> {
    check_ensemble(ensemble)?;
    if label >= ensemble[0].classes {
        return arg_err(format!("label {label} out of range"));
    }
    let mut e = 0.0;
    let mut ce = 0.0;
    for params in ensemble {
        let probs = predict_proba(params, features)?;
        e += el2n(&probs, label);
        ce += cross_entropy(&probs, label);
    }
    let n = ensemble.len() as f64;
    Ok((e / n, ce / n))
}

/// EL2N scaled by the SuperLoss weight of the sample's cross-entropy; plain
/// EL2N when `superloss` is `None`.
pub fn cl_score(
    ensemble: &[ModelParams],
    features: &[f64],
    label: usize,
    superloss: Option<&SuperLossConfig>,
) -> Result<f64> {
    let (e, ce) = score_parts(ensemble, features, label)?;
    match superloss {
        None => Ok(e),
        Some(cfg) => Ok(superloss_sigma(ce, cfg)? * e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustSetConfig {
    /// TrustSet size; `None` means `ceil(|L| / 2)`.
    pub size: Option<usize>,
    pub use_curriculum: bool,
    pub ensemble_size: usize,
}

impl Default for TrustSetConfig {
    fn default() -> Self {
        Self {
            size: None,
            use_curriculum: true,
            ensemble_size: 1,
        }
    }
}

impl TrustSetConfig {
    pub fn resolved_size(&self, labeled: usize) -> usize {
        self.size.unwrap_or(labeled.div_ceil(2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustSet {
    /// Members grouped by class (descending score within a class), followed
    /// by redistributed extras in global score order.
    pub ids: Vec<SampleId>,
    pub per_class_counts: Vec<usize>,
    /// Score of every member, parallel to `ids`.
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl TrustSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: SampleId) -> bool {
        self.ids.contains(&id)
    }

    /// Debug export: `id,class,score,rank`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "id,class,score,rank")?;
        for (rank, ((id, label), score)) in self.ids.iter().zip(&self.labels).zip(&self.scores).enumerate() {
            writeln!(f, "{id},{label},{score:?},{rank}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// A labeled sample with its importance score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub id: SampleId,
    pub label: usize,
    pub score: f64,
}

/// Scores every sample in parallel.
pub fn score_samples(
    samples: &[&Sample],
    ensemble: &[ModelParams],
    superloss: Option<&SuperLossConfig>,
) -> Result<Vec<Scored>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(Scored {
                id: s.id,
                label: s.label,
                score: cl_score(ensemble, &s.features, s.label, superloss)?,
            })
        })
        .collect()
}

/// Descending score, ties by ascending id.
fn by_rank(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// Per-class quotas `floor(size / C)`, remainder to the lowest class indices.
pub fn class_quotas(size: usize, num_classes: usize) -> Vec<usize> {
    let base = size / num_classes;
    let rem = size % num_classes;
    (0..num_classes).map(|c| base + usize::from(c < rem)).collect()
}

/// Class-balanced selection of `size` items from pre-scored samples.
///
/// With `skip_top`, the best `quota` items of each class are passed over and
/// the next `quota` are taken instead. Shortfalls are filled from the
/// leftover items in global rank order (skipped items last).
pub fn select_balanced(
    scored: &[Scored],
    num_classes: usize,
    size: usize,
    skip_top: bool,
) -> Result<TrustSet> {
    if size == 0 {
        return arg_err("TrustSet size must be positive");
    }
    if num_classes == 0 {
        return arg_err("no classes");
    }
    let size = size.min(scored.len());
    let quotas = class_quotas(size, num_classes);

    let mut by_class: Vec<Vec<Scored>> = vec![Vec::new(); num_classes];
    for s in scored {
        if s.label >= num_classes {
            return arg_err(format!("label {} out of range", s.label));
        }
        by_class[s.label].push(*s);
    }
    let mut chosen: Vec<Scored> = Vec::with_capacity(size);
    let mut leftover: Vec<Scored> = Vec::new();
    let mut skipped: Vec<Scored> = Vec::new();
    for (members, &quota) in by_class.iter_mut().zip(&quotas) {
        members.sort_by(by_rank);
        let start = if skip_top { quota.min(members.len()) } else { 0 };
        let end = (start + quota).min(members.len());
        skipped.extend_from_slice(&members[..start]);
        chosen.extend_from_slice(&members[start..end]);
        leftover.extend_from_slice(&members[end..]);
    }
    leftover.sort_by(by_rank);
    skipped.sort_by(by_rank);
    let deficit = size - chosen.len();
    chosen.extend(leftover.into_iter().chain(skipped).take(deficit));

    let mut per_class_counts = vec![0; num_classes];
    for s in &chosen {
        per_class_counts[s.label] += 1;
    }
    Ok(TrustSet {
        ids: chosen.iter().map(|s| s.id).collect(),
        per_class_counts,
        scores: chosen.iter().map(|s| s.score).collect(),
        labels: chosen.iter().map(|s| s.label).collect(),
    })
}

fn extract(
    labeled: &[&Sample],
    ensemble: &[ModelParams],
    cfg: &TrustSetConfig,
    superloss: &SuperLossConfig,
    skip_top: bool,
) -> Result<TrustSet> {
    if labeled.is_empty() {
        return arg_err("cannot extract a TrustSet from an empty labeled set");
    }
    check_ensemble(ensemble)?;
    let sl = cfg.use_curriculum.then_some(superloss);
    let scored = score_samples(labeled, ensemble, sl)?;
    select_balanced(&scored, ensemble[0].classes, cfg.resolved_size(labeled.len()), skip_top)
}

/// The class-balanced top-scoring subset of the labeled set.
pub fn extract_trustset(
    labeled: &[&Sample],
    ensemble: &[ModelParams],
    cfg: &TrustSetConfig,
    superloss: &SuperLossConfig,
) -> Result<TrustSet> {
    extract(labeled, ensemble, cfg, superloss, false)
}

/// The next-best group per class (skips each class's top quota).
pub fn second_best_trustset(
    labeled: &[&Sample],
    ensemble: &[ModelParams],
    cfg: &TrustSetConfig,
    superloss: &SuperLossConfig,
) -> Result<TrustSet> {
    extract(labeled, ensemble, cfg, superloss, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn el2n_values() {
        assert_eq!(el2n(&[0.0, 1.0, 0.0], 1), 0.0);
        let u = vec![0.1; 10];
        assert!((el2n(&u, 4) - 0.9f64.sqrt()).abs() < 1e-12);
        assert!((el2n(&[0.2, 0.5, 0.3], 0) - 0.98f64.sqrt()).abs() < 1e-12);
        assert!((el2n(&[0.0, 1.0], 0) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sigma_is_one_at_threshold() {
        let cfg = SuperLossConfig { tau: 1.7, lambda: 0.4 };
        assert_eq!(superloss_sigma(1.7, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn sigma_tends_to_one_for_large_lambda() {
        let cfg = SuperLossConfig {
            tau: 10f64.ln(),
            lambda: 1e6,
        };
        for loss in [0.0, 0.5, 2.0, 5.0, 20.0] {
            let s = superloss_sigma(loss, &cfg).unwrap();
            assert!((s - 1.0).abs() < 1e-3, "loss {loss}: sigma {s}");
        }
    }

    #[test]
    fn sigma_rejects_non_finite_loss() {
        let cfg = SuperLossConfig { tau: 1.0, lambda: 1.0 };
        assert!(matches!(superloss_sigma(f64::NAN, &cfg), Err(Error::Numeric(_))));
    }

    #[test]
    fn hard_samples_are_down_weighted() {
        let cfg = SuperLossConfig { tau: 1.0, lambda: 1.0 };
        let s = superloss_sigma(3.0, &cfg).unwrap();
        assert!(s < 1.0 && s > 0.0);
        // h(s) = 2 e^s + 2 s has its root where the derivative vanishes
        let ls = s.ln();
        assert!((2.0 * ls.exp() + 2.0 * ls).abs() < 1e-9);
    }

    #[test]
    fn quotas_assign_remainder_low_first() {
        assert_eq!(class_quotas(7, 3), vec![3, 2, 2]);
        assert_eq!(class_quotas(4, 2), vec![2, 2]);
    }

    fn sc(id: usize, label: usize, score: f64) -> Scored {
        Scored { id, label, score }
    }

    #[test]
    fn full_selection_returns_everything() {
        let scored: Vec<Scored> = (0..7).map(|i| sc(i, i % 2, i as f64)).collect();
        let ts = select_balanced(&scored, 2, 7, false).unwrap();
        let mut ids = ts.ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());
        assert!(select_balanced(&scored, 2, 0, false).is_err());
    }

    #[test]
    fn second_best_takes_bottom_half_of_double_quota_class() {
        let scored: Vec<Scored> = (0..8).map(|i| sc(i, i % 2, i as f64)).collect();
        let ts = select_balanced(&scored, 2, 4, true).unwrap();
        let mut ids = ts.ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn small_class_contributes_nothing_before_redistribution() {
        // class 1 has a single sample, quota 2: skipped entirely in the
        // second-best pass; redistribution prefers class 0 leftovers.
        let mut scored: Vec<Scored> = (0..6).map(|i| sc(i, 0, i as f64)).collect();
        scored.push(sc(6, 1, 100.0));
        let ts = select_balanced(&scored, 2, 4, true).unwrap();
        assert_eq!(ts.per_class_counts, vec![4, 0]);
        assert_eq!(ts.ids, vec![3, 2, 1, 0]);
    }
}
