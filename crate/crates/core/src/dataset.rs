//! Datasets, class-imbalance construction and the labeled/unlabeled/test split.
//!
//! Sample ids inside a [`Dataset`] are always dense: sample `i` has id `i`.
//! Operations that drop samples renumber the survivors in their original
//! order.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::{rng_from, SampleId};

/// Name of the label column written by [`Dataset::write_csv`].
pub const LABEL_COLUMN: &str = "__label__";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    dim: usize,
    feature_names: Vec<String>,
    class_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, renumbering ids densely in the given order.
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let feature_names = (0..dim).map(|j| format!("f{j}")).collect();
        let class_names = (0..num_classes).map(|c| c.to_string()).collect();
        Self::with_names(samples, feature_names, class_names)
    }

    fn with_names(
        mut samples: Vec<Sample>,
        feature_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let num_classes = class_names.len();
        if num_classes == 0 {
            return arg_err("dataset needs at least one class");
        }
        let dim = feature_names.len();
        for (i, s) in samples.iter_mut().enumerate() {
            if s.features.len() != dim {
                return arg_err(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.features.len()
                ));
            }
            if s.label >= num_classes {
                return arg_err(format!("sample {i} has label {} >= {num_classes}", s.label));
            }
            s.id = i;
        }
        Ok(Self {
            samples,
            num_classes,
            dim,
            feature_names,
            class_names,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, id: SampleId) -> &Sample {
        &self.samples[id]
    }

    pub fn features(&self, id: SampleId) -> &[f64] {
        &self.samples[id].features
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Per-class counts restricted to `ids`.
    pub fn class_counts_of<'a>(&self, ids: impl IntoIterator<Item = &'a SampleId>) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &id in ids {
            counts[self.samples[id].label] += 1;
        }
        counts
    }

    /// Writes the dataset as CSV: feature columns followed by `__label__`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(LABEL_COLUMN);
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.features.iter().map(|v| format!("{v:?}")).collect();
            row.push(self.class_names[s.label].clone());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Synthetic isotropic Gaussian mixture with `per_class` samples per class.
///
/// Class means are the vertices of a regular simplex with edge `class_sep`
/// under a seeded random rotation when `dim >= num_classes`; otherwise they
/// are seeded Gaussian draws rescaled so the closest pair is `class_sep`
/// apart. Noise is unit-variance.
pub fn gen_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim < 2 || per_class < 2 {
        return arg_err(format!(
            "gaussian mixture needs classes >= 2, dim >= 2, per_class >= 2 (got {num_classes}, {dim}, {per_class})"
        ));
    }
    if !(class_sep > 0.0 && class_sep.is_finite()) {
        return arg_err(format!("class_sep must be positive, got {class_sep}"));
    }
    let mut rng = rng_from(seed, 0);
    let means = class_means(num_classes, dim, class_sep, &mut rng);

    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample {
                id: 0,
                features,
                label,
            });
        }
    }
    Dataset::new(samples, num_classes)
}

/// The class means `gen_gaussian_mixture` uses for the same arguments.
pub fn mixture_means(num_classes: usize, dim: usize, class_sep: f64, seed: u64) -> Vec<Vec<f64>> {
    class_means(num_classes, dim, class_sep, &mut rng_from(seed, 0))
}

fn class_means(c: usize, d: usize, sep: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let gauss = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };
    if d >= c {
        // Orthonormal frame by Gram-Schmidt; scaled basis vectors are a
        // regular simplex with edge `sep`.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(c);
        while basis.len() < c {
            let mut v = gauss(rng);
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                basis.push(v);
            }
        }
        let scale = sep / std::f64::consts::SQRT_2;
        let mut means: Vec<Vec<f64>> = basis
            .into_iter()
            .map(|q| q.into_iter().map(|a| a * scale).collect())
            .collect();
        let centroid: Vec<f64> = (0..d)
            .map(|j| means.iter().map(|m| m[j]).sum::<f64>() / c as f64)
            .collect();
        for m in &mut means {
            m.iter_mut().zip(&centroid).for_each(|(a, b)| *a -= b);
        }
        means
    } else {
        let mut means: Vec<Vec<f64>> = (0..c).map(|_| gauss(rng)).collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..c {
            for j in i + 1..c {
                min_dist = min_dist.min(euclid(&means[i], &means[j]));
            }
        }
        let scale = sep / min_dist.max(1e-12);
        for m in &mut means {
            m.iter_mut().for_each(|a| *a *= scale);
        }
        means
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// How class sizes are reshaped relative to the largest class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ImbalanceSpec {
    #[default]
    None,
    /// Class `c` keeps `round(n_max * ratios[c] / max(ratios))` samples.
    LinearRatio { ratios: Vec<f64> },
    /// Class `c` keeps `round(n_max * factor^(-c / (C - 1)))` samples.
    ExponentialLongtail { factor: f64 },
}

impl ImbalanceSpec {
    /// The `1:2:...:C` profile.
    pub fn linear_steps(num_classes: usize) -> Self {
        Self::LinearRatio {
            ratios: (1..=num_classes).map(|r| r as f64).collect(),
        }
    }

    /// Per-class target counts, or `None` when the dataset is left unchanged.
    pub fn target_counts(&self, num_classes: usize, n_max: usize) -> Result<Option<Vec<usize>>> {
        let counts: Vec<usize> = match self {
            Self::None => return Ok(None),
            Self::LinearRatio { ratios } => {
                if ratios.len() != num_classes {
                    return arg_err(format!(
                        "{} imbalance ratios for {num_classes} classes",
                        ratios.len()
                    ));
                }
                if ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                    return arg_err("imbalance ratios must be positive");
                }
                let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
                ratios
                    .iter()
                    .map(|r| (n_max as f64 * r / max).round() as usize)
                    .collect()
            }
            Self::ExponentialLongtail { factor } => {
                if !(*factor >= 1.0 && factor.is_finite()) {
                    return arg_err(format!("long-tail factor must be >= 1, got {factor}"));
                }
                let denom = (num_classes.max(2) - 1) as f64;
                (0..num_classes)
                    .map(|c| (n_max as f64 * factor.powf(-(c as f64) / denom)).round() as usize)
                    .collect()
            }
        };
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return arg_err(format!("imbalance leaves class {c} empty"));
        }
        Ok(Some(counts))
    }
}

/// Subsamples each class to the count prescribed by `spec`, where the
/// reference count is the largest class in `dataset`.
pub fn apply_imbalance(dataset: &Dataset, spec: &ImbalanceSpec, seed: u64) -> Result<Dataset> {
    let available = dataset.class_counts();
    let n_max = available.iter().copied().max().unwrap_or(0);
    let Some(targets) = spec.target_counts(dataset.num_classes(), n_max)? else {
        return Ok(dataset.clone());
    };
    let mut rng = rng_from(seed, 1);
    let mut keep = vec![false; dataset.len()];
    for (class, &target) in targets.iter().enumerate() {
        if target > available[class] {
            return arg_err(format!(
                "class {class} needs {target} samples but only {} exist",
                available[class]
            ));
        }
        let mut members: Vec<SampleId> = dataset
            .samples()
            .iter()
            .filter(|s| s.label == class)
            .map(|s| s.id)
            .collect();
        members.shuffle(&mut rng);
        for &id in &members[..target] {
            keep[id] = true;
        }
    }
    let samples = dataset
        .samples()
        .iter()
        .filter(|s| keep[s.id])
        .cloned()
        .collect();
    Dataset::with_names(
        samples,
        dataset.feature_names.clone(),
        dataset.class_names.clone(),
    )
}

/// Reads a numeric CSV with a header row. Every column except
/// `label_column` is a feature (file order); labels are mapped to class
/// indices by order of first appearance.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Format {
            row: 0,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
    let header = reader.headers()?.clone();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Format {
            row: 1,
            msg: format!("no column named {label_column:?}"),
        })?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut class_names: Vec<String> = Vec::new();
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Header is row 1.
        let row = i + 2;
        let record = record.map_err(|e| Error::Format {
            row,
            msg: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Format {
                row,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let mut features = Vec::with_capacity(feature_names.len());
        let mut label = 0;
        for (j, field) in record.iter().enumerate() {
            if j == label_idx {
                let name = field.trim();
                label = match class_names.iter().position(|c| c == name) {
                    Some(k) => k,
                    None => {
                        class_names.push(name.to_string());
                        class_names.len() - 1
                    }
                };
            } else {
                let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                    row,
                    msg: format!("non-numeric value {field:?} in column {:?}", &header[j]),
                })?;
                features.push(v);
            }
        }
        samples.push(Sample {
            id: 0,
            features,
            label,
        });
    }
    if samples.is_empty() {
        return Err(Error::Format {
            row: 1,
            msg: "no data rows".into(),
        });
    }
    Dataset::with_names(samples, feature_names, class_names)
}

/// How the initial labeled set is drawn from the training pool.
///
/// The twisted modes sort classes by pool size; the smallest half of the
/// classes are "rare", the rest "main". `rare_count` samples are drawn
/// uniformly from the rare classes and `main_count` from the main classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitPolicy {
    #[default]
    Random,
    TwistedMain { rare_count: usize, main_count: usize },
    TwistedRare { rare_count: usize, main_count: usize },
}

impl InitPolicy {
    pub fn initial_size(&self, requested: usize) -> usize {
        match *self {
            Self::Random => requested,
            Self::TwistedMain {
                rare_count,
                main_count,
            }
            | Self::TwistedRare {
                rare_count,
                main_count,
            } => rare_count + main_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub labeled: BTreeSet<SampleId>,
    pub unlabeled: BTreeSet<SampleId>,
    pub test: BTreeSet<SampleId>,
}

/// Stratified test split, then the initial labeled set from the remainder.
pub fn init_split(
    dataset: &Dataset,
    initial_labeled: usize,
    test_fraction: f64,
    seed: u64,
    policy: InitPolicy,
) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&test_fraction) {
        return arg_err(format!("test_fraction must lie in [0, 1), got {test_fraction}"));
    }
    let n = dataset.len();
    let initial_labeled = policy.initial_size(initial_labeled);
    let mut rng = rng_from(seed, 2);

    let counts = dataset.class_counts();
    let test_quota = stratified_quota(&counts, test_fraction, (test_fraction * n as f64).round() as usize);
    if initial_labeled + test_quota.iter().sum::<usize>() > n {
        return arg_err(format!(
            "initial labeled size {initial_labeled} plus test set exceeds {n} samples"
        ));
    }

    let mut by_class: Vec<Vec<SampleId>> = vec![Vec::new(); dataset.num_classes()];
    for s in dataset.samples() {
        by_class[s.label].push(s.id);
    }
    let mut test = BTreeSet::new();
    let mut pool_by_class: Vec<Vec<SampleId>> = Vec::with_capacity(by_class.len());
    for (members, &quota) in by_class.iter_mut().zip(&test_quota) {
        members.shuffle(&mut rng);
        test.extend(members[..quota].iter().copied());
        let mut rest = members[quota..].to_vec();
        rest.sort_unstable();
        pool_by_class.push(rest);
    }

    let labeled: BTreeSet<SampleId> = match policy {
        InitPolicy::Random => {
            let mut pool: Vec<SampleId> = pool_by_class.iter().flatten().copied().collect();
            pool.sort_unstable();
            pool.shuffle(&mut rng);
            pool[..initial_labeled].iter().copied().collect()
        }
        InitPolicy::TwistedMain {
            rare_count,
            main_count,
        }
        | InitPolicy::TwistedRare {
            rare_count,
            main_count,
        } => {
            let mut order: Vec<usize> = (0..pool_by_class.len()).collect();
            order.sort_by_key(|&c| (pool_by_class[c].len(), c));
            let (rare, main) = order.split_at(order.len() / 2);
            let mut chosen = BTreeSet::new();
            for (classes, count) in [(rare, rare_count), (main, main_count)] {
                let mut group: Vec<SampleId> = classes
                    .iter()
                    .flat_map(|&c| pool_by_class[c].iter().copied())
                    .collect();
                if group.len() < count {
                    return arg_err(format!(
                        "twisted init wants {count} samples from a group of {}",
                        group.len()
                    ));
                }
                group.sort_unstable();
                group.shuffle(&mut rng);
                chosen.extend(group[..count].iter().copied());
            }
            chosen
        }
    };
    let unlabeled = pool_by_class
        .into_iter()
        .flatten()
        .filter(|id| !labeled.contains(id))
        .collect();
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        test,
    })
}

/// Largest-remainder allocation of `total` across classes proportional to
/// `fraction * counts[c]`, ties to the lowest class index.
fn stratified_quota(counts: &[usize], fraction: f64, total: usize) -> Vec<usize> {
    let exact: Vec<f64> = counts.iter().map(|&n| n as f64 * fraction).collect();
    let mut quota: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut remaining = total.saturating_sub(quota.iter().sum());
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for c in order {
        if remaining == 0 {
            break;
        }
        if quota[c] < counts[c] {
            quota[c] += 1;
            remaining -= 1;
        }
    }
    quota
}

/// Moves `ids` from the unlabeled pool into the labeled set.
pub fn reveal_labels(split: &DatasetSplit, ids: &[SampleId]) -> Result<DatasetSplit> {
    let mut next = split.clone();
    for &id in ids {
        if !next.unlabeled.remove(&id) {
            return arg_err(format!("sample {id} is not in the unlabeled pool"));
        }
        next.labeled.insert(id);
    }
    Ok(next)
}
