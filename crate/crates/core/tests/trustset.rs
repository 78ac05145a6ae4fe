use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trustal::dataset::{gen_gaussian_mixture, Sample};
use trustal::learner::{cross_entropy, predict_proba, ModelParams};
use trustal::trustset::{
    cl_score, el2n, el2n_score, extract_trustset, second_best_trustset, select_balanced,
    superloss_sigma, Scored, SuperLossConfig, TrustSetConfig, SIGMA_MAX, SIGMA_MIN,
};

fn g(loss: f64, tau: f64, lambda: f64, sigma: f64) -> f64 {
    (loss - tau) * sigma + lambda * sigma.ln().powi(2)
}

/// Minimizer over a 2001-point log grid on [1e-6, 1e6], refined by golden
/// section between the neighbours of the best grid point.
fn grid_sigma(loss: f64, tau: f64, lambda: f64) -> f64 {
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let n = 2001;
    let s_at = |i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let f = |s: f64| g(loss, tau, lambda, s.exp());
    let best = (0..n)
        .min_by(|&a, &b| f(s_at(a)).total_cmp(&f(s_at(b))))
        .unwrap();
    let (mut a, mut b) = (s_at(best.saturating_sub(1)), s_at((best + 1).min(n - 1)));
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let s = 0.5 * (a + b);
    // The endpoints are not reached by the bracket midpoint.
    [lo, s, hi]
        .into_iter()
        .min_by(|x, y| f(*x).total_cmp(&f(*y)))
        .unwrap()
        .exp()
}

fn sigma(loss: f64, tau: f64, lambda: f64) -> f64 {
    superloss_sigma(loss, &SuperLossConfig { tau, lambda }).unwrap()
}

#[test]
fn sigma_is_one_at_threshold() {
    for (tau, lambda) in [(0.0, 1.0), (10f64.ln(), 0.25), (1.0, 1e-3), (5.0, 1e6)] {
        assert!((sigma(tau, tau, lambda) - 1.0).abs() <= 1e-8);
    }
}

#[test]
fn huge_lambda_pins_sigma_to_one() {
    for loss in [0.0, 0.5, 1.0, 2.0, 3.0, 5.0] {
        let s = sigma(loss, 10f64.ln(), 1e6);
        assert!((s - 1.0).abs() <= 1e-3, "loss {loss}: sigma {s}");
    }
}

#[test]
fn sigma_matches_grid_oracle_below_threshold() {
    let tau = 3f64.ln();
    let s = sigma(tau - 1.0, tau, 0.25);
    assert!((s - grid_sigma(tau - 1.0, tau, 0.25)).abs() <= 1e-4);
}

#[test]
fn sigma_matches_grid_oracle_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let loss = rng.random_range(0.0..6.0);
        let tau = rng.random_range(0.1..4.0);
        let lambda = rng.random_range(0.05..20.0);
        let got = sigma(loss, tau, lambda);
        let want = grid_sigma(loss, tau, lambda);
        assert!(
            (got - want).abs() <= 1e-4,
            "({loss}, {tau}, {lambda}): {got} vs {want}"
        );
    }
}

#[test]
fn sigma_beats_every_grid_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (loss, tau, lambda) = (rng.random_range(0.0..6.0), rng.random_range(0.1..4.0), rng.random_range(0.05..20.0));
        let s = sigma(loss, tau, lambda);
        let best = g(loss, tau, lambda, s);
        for i in 0..2001 {
            let t = (SIGMA_MIN.ln() + (SIGMA_MAX.ln() - SIGMA_MIN.ln()) * i as f64 / 2000.0).exp();
            assert!(best <= g(loss, tau, lambda, t) + 1e-7);
        }
    }
}

#[test]
fn sigma_non_increasing_in_loss() {
    for lambda in [0.1, 1.0, 10.0] {
        let mut prev = f64::INFINITY;
        for i in 0..=400 {
            let s = sigma(i as f64 * 0.02, 2.0, lambda);
            assert!(s <= prev, "lambda {lambda}, step {i}");
            prev = s;
        }
    }
}

#[test]
fn non_finite_loss_rejected() {
    let cfg = SuperLossConfig { tau: 1.0, lambda: 1.0 };
    assert!(superloss_sigma(f64::NAN, &cfg).is_err());
    assert!(superloss_sigma(f64::INFINITY, &cfg).is_err());
}

#[test]
fn el2n_values() {
    let uniform = vec![0.1; 10];
    assert!((el2n(&uniform, 3) - 0.9f64.sqrt()).abs() < 1e-12);
    let direct = (0.8f64 * 0.8 + 0.5 * 0.5 + 0.3 * 0.3).sqrt();
    assert!((el2n(&[0.2, 0.5, 0.3], 0) - direct).abs() < 1e-12);
    assert_eq!(el2n(&[0.0, 1.0, 0.0], 1), 0.0);
    assert!((el2n(&[1.0, 0.0], 1) - 2f64.sqrt()).abs() < 1e-12);
    let zero = ModelParams::zeros(2, 3, 10);
    assert!((el2n_score(&[zero], &[1.0, -1.0], 0).unwrap() - 0.9f64.sqrt()).abs() < 1e-12);
}

#[test]
fn cl_score_combines_sigma_and_el2n() {
    let ens = [ModelParams::init(3, 4, 3, 1), ModelParams::init(3, 4, 3, 2)];
    let x = [0.3, -1.2, 2.0];
    let sl = SuperLossConfig::for_classes(3, 1.0);
    for label in 0..3 {
        let (mut e, mut ce) = (0.0, 0.0);
        for p in &ens {
            let probs = predict_proba(p, &x).unwrap();
            e += el2n(&probs, label) / 2.0;
            ce += cross_entropy(&probs, label) / 2.0;
        }
        let plain = cl_score(&ens, &x, label, None).unwrap();
        assert!((plain - e).abs() < 1e-12);
        let curriculum = cl_score(&ens, &x, label, Some(&sl)).unwrap();
        let want = superloss_sigma(ce, &sl).unwrap() * e;
        assert!((curriculum - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
    // At loss == tau the weight is one.
    let at_tau = SuperLossConfig { tau: { let p = predict_proba(&ens[0], &x).unwrap(); cross_entropy(&p, 1) }, lambda: 1.0 };
    let one = [ens[0].clone()];
    assert!((cl_score(&one, &x, 1, Some(&at_tau)).unwrap() - el2n_score(&one, &x, 1).unwrap()).abs() < 1e-12);
}

#[test]
fn easy_sample_outscores_hard_with_equal_el2n() {
    let sl = SuperLossConfig::for_classes(3, 1.0);
    let e = 0.6;
    let easy = superloss_sigma(0.5, &sl).unwrap() * e;
    let hard = superloss_sigma(2.0, &sl).unwrap() * e;
    assert!(easy > hard);
    assert!(grid_sigma(0.5, sl.tau, 1.0) > grid_sigma(2.0, sl.tau, 1.0));
}

fn scored(items: &[(usize, usize, f64)]) -> Vec<Scored> {
    items
        .iter()
        .map(|&(id, label, score)| Scored { id, label, score })
        .collect()
}

/// Independent balanced selection: per-class quotas, then the best leftovers.
fn oracle_select(items: &[Scored], c: usize, size: usize) -> BTreeSet<usize> {
    let size = size.min(items.len());
    let mut quotas = vec![size / c; c];
    for q in quotas.iter_mut().take(size % c) {
        *q += 1;
    }
    let rank = |a: &&Scored, b: &&Scored| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id));
    let mut chosen = BTreeSet::new();
    for class in 0..c {
        let mut members: Vec<&Scored> = items.iter().filter(|s| s.label == class).collect();
        members.sort_by(rank);
        chosen.extend(members.iter().take(quotas[class]).map(|s| s.id));
    }
    let mut rest: Vec<&Scored> = items.iter().filter(|s| !chosen.contains(&s.id)).collect();
    rest.sort_by(rank);
    let missing = size - chosen.len();
    chosen.extend(rest.iter().take(missing).map(|s| s.id));
    chosen
}

#[test]
fn balanced_two_class_top_two() {
    let items = scored(&[
        (0, 0, 0.1),
        (1, 0, 0.9),
        (2, 0, 0.4),
        (3, 0, 0.7),
        (4, 0, 0.2),
        (5, 1, 0.3),
        (6, 1, 0.8),
        (7, 1, 0.5),
        (8, 1, 0.05),
        (9, 1, 0.6),
    ]);
    let ts = select_balanced(&items, 2, 4, false).unwrap();
    let got: BTreeSet<usize> = ts.ids.iter().copied().collect();
    assert_eq!(got, oracle_select(&items, 2, 4));
    assert_eq!(got, BTreeSet::from([1, 3, 6, 9]));
    assert_eq!(ts.per_class_counts, vec![2, 2]);
}

#[test]
fn rare_class_deficit_goes_to_best_remaining() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut items = Vec::new();
    for class in 0..9 {
        for _ in 0..5 {
            items.push((items.len(), class, rng.random_range(0.0..1.0)));
        }
    }
    items.push((items.len(), 9, 0.01));
    let items = scored(&items);
    let ts = select_balanced(&items, 10, 20, false).unwrap();
    assert_eq!(ts.ids.len(), 20);
    assert_eq!(ts.per_class_counts[9], 1);
    let got: BTreeSet<usize> = ts.ids.iter().copied().collect();
    assert_eq!(got, oracle_select(&items, 10, 20));
}

#[test]
fn full_size_returns_everything() {
    let ds = gen_gaussian_mixture(3, 3, 7, 2.0, 0).unwrap();
    let refs: Vec<&Sample> = ds.samples().iter().collect();
    let ens = [ModelParams::init(3, 4, 3, 0)];
    let cfg = TrustSetConfig {
        size: Some(refs.len()),
        ..Default::default()
    };
    let sl = SuperLossConfig::for_classes(3, 1.0);
    let ts = extract_trustset(&refs, &ens, &cfg, &sl).unwrap();
    let got: BTreeSet<usize> = ts.ids.iter().copied().collect();
    assert_eq!(got, (0..refs.len()).collect());
    let zero = TrustSetConfig {
        size: Some(0),
        ..Default::default()
    };
    assert!(extract_trustset(&refs, &ens, &zero, &sl).is_err());
}

#[test]
fn second_best_takes_bottom_half() {
    let items = scored(&[(0, 0, 0.9), (1, 0, 0.1), (2, 0, 0.5), (3, 0, 0.3), (4, 1, 0.2), (5, 1, 0.8), (6, 1, 0.6), (7, 1, 0.7)]);
    let ts = select_balanced(&items, 2, 4, true).unwrap();
    let got: BTreeSet<usize> = ts.ids.iter().copied().collect();
    assert_eq!(got, BTreeSet::from([1, 3, 4, 6]));
}

#[test]
fn second_best_skips_small_class() {
    // Class 1 has exactly its quota: nothing from it before redistribution.
    let items = scored(&[(0, 0, 0.9), (1, 0, 0.8), (2, 0, 0.7), (3, 0, 0.6), (4, 1, 0.95), (5, 1, 0.85)]);
    let ts = select_balanced(&items, 2, 4, true).unwrap();
    // Class 0 contributes its next two (2, 3); the deficit comes from
    // leftovers (none) and then the skipped items by rank.
    assert_eq!(&ts.ids[..2], &[2, 3]);
    assert_eq!(ts.ids.len(), 4);
    assert_eq!(&ts.ids[2..], &[4, 0]);
}

fn random_labeled(seed: u64, c: usize, per_class: usize) -> (trustal::dataset::Dataset, Vec<ModelParams>) {
    let ds = gen_gaussian_mixture(c, 4, per_class, 2.0, seed).unwrap();
    (ds, vec![ModelParams::init(4, 6, c, seed ^ 77)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn second_best_disjoint_from_best(seed in 0u64..1000, c in 2usize..5, size in 2usize..12) {
        let (ds, ens) = random_labeled(seed, c, 2 * size.div_ceil(c) + 1);
        let refs: Vec<&Sample> = ds.samples().iter().collect();
        let cfg = TrustSetConfig { size: Some(size), ..Default::default() };
        let sl = SuperLossConfig::for_classes(c, 1.0);
        let best: BTreeSet<usize> = extract_trustset(&refs, &ens, &cfg, &sl).unwrap().ids.into_iter().collect();
        let second: BTreeSet<usize> = second_best_trustset(&refs, &ens, &cfg, &sl).unwrap().ids.into_iter().collect();
        prop_assert!(best.is_disjoint(&second));
        prop_assert_eq!(best.len(), size);
    }

    #[test]
    fn counts_balanced_when_classes_are_large(seed in 0u64..1000, c in 2usize..6, size in 1usize..30, extra in 0usize..4) {
        let (ds, ens) = random_labeled(seed, c, size.div_ceil(c).max(2) + extra);
        let refs: Vec<&Sample> = ds.samples().iter().collect();
        let cfg = TrustSetConfig { size: Some(size), ..Default::default() };
        let ts = extract_trustset(&refs, &ens, &cfg, &SuperLossConfig::for_classes(c, 1.0)).unwrap();
        let max = *ts.per_class_counts.iter().max().unwrap();
        let min = *ts.per_class_counts.iter().min().unwrap();
        prop_assert!(max - min <= 1);
        prop_assert!(ts.ids.iter().all(|&id| id < ds.len()));
    }

    #[test]
    fn matches_oracle_on_random_scores(seed in any::<u64>(), c in 1usize..5, n in 1usize..25, size in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<Scored> = (0..n)
            .map(|id| Scored { id, label: rng.random_range(0..c), score: (rng.random_range(0..6) as f64) / 5.0 })
            .collect();
        let ts = select_balanced(&items, c, size, false).unwrap();
        let got: BTreeSet<usize> = ts.ids.iter().copied().collect();
        prop_assert_eq!(got.len(), ts.ids.len());
        prop_assert_eq!(got, oracle_select(&items, c, size));
    }

    #[test]
    fn permuting_ids_permutes_output(seed in any::<u64>(), c in 2usize..4, n in 2usize..20, size in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Distinct scores so tie-breaking plays no role.
        let mut scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
        scores.shuffle(&mut rng);
        let items: Vec<Scored> = (0..n)
            .map(|id| Scored { id, label: rng.random_range(0..c), score: scores[id] })
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let renamed: Vec<Scored> = items.iter().map(|s| Scored { id: perm[s.id], ..*s }).collect();
        let a: BTreeSet<usize> = select_balanced(&items, c, size, false).unwrap().ids.iter().map(|&i| perm[i]).collect();
        let b: BTreeSet<usize> = select_balanced(&renamed, c, size, false).unwrap().ids.into_iter().collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn el2n_bounded(seed in any::<u64>(), x in prop::collection::vec(-10.0..10.0f64, 3), label in 0usize..4) {
        let e = el2n_score(&[ModelParams::init(3, 5, 4, seed)], &x, label).unwrap();
        prop_assert!((0.0..=2f64.sqrt()).contains(&e));
    }
}
