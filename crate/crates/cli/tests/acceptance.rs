//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trustal::al_loop::{aubc, aubc_of_curve, f_acc, penalty_matrix, RunLog};
use trustal::dataset::{ImbalanceSpec, Sample};
use trustal::learner::{loss_and_grad, ModelParams};
use trustal::rl::{train_reward_net, RLConfig, ReplayBuffer, RewardNet, Transition};
use trustal::transport::{wasserstein, PointCloud};
use trustal::trustset::{superloss_sigma, SuperLossConfig, SIGMA_MAX, SIGMA_MIN};
use trustal_cli::config::DataSource;
use trustal_cli::{cmd_run, ExperimentConfig, RunOverrides};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean AUBC and F-acc of one strategy.
fn means(logs: &[RunLog], strategy: &str) -> (f64, f64) {
    let mine: Vec<&RunLog> = logs.iter().filter(|l| l.strategy == strategy).collect();
    assert!(!mine.is_empty(), "no runs of {strategy}");
    let a: Vec<f64> = mine.iter().map(|l| aubc(l).unwrap()).collect();
    let f: Vec<f64> = mine.iter().map(|l| f_acc(l).unwrap()).collect();
    (mean(&a), mean(&f))
}

fn run_config(name: &str, strategies: &[&str], out: &Path) -> Vec<RunLog> {
    let overrides = RunOverrides {
        strategies: strategies.iter().map(|s| s.to_string()).collect(),
        out: Some(out.to_path_buf()),
        quiet: true,
        ..Default::default()
    };
    cmd_run(&configs_dir().join(name), &overrides).unwrap().logs
}

/// Checks that the shipped imbalanced benchmark has the required shape.
fn imbalanced_benchmark_shape() -> Result<(), String> {
    let cfg = ExperimentConfig::load(&configs_dir().join("imbalanced.toml")).map_err(|e| e.to_string())?;
    let al = cfg.al_config(0);
    let DataSource::Generator { num_classes, dim, .. } = cfg.dataset.source else {
        return Err("not a generated benchmark".into());
    };
    let linear = matches!(&cfg.dataset.imbalance, ImbalanceSpec::LinearRatio { ratios }
        if *ratios == (1..=10).map(f64::from).collect::<Vec<_>>());
    let shape = (num_classes, dim, al.initial_labeled, al.batch, al.budget, al.learner.hidden, cfg.seeds.len());
    if !linear || shape != (10, 16, 50, 25, 300, 32, 5) {
        return Err(format!("unexpected benchmark {shape:?}, linear 1..10: {linear}"));
    }
    Ok(())
}

fn criteria_1_2_4(scratch: &Path) -> Vec<Outcome> {
    if let Err(e) = imbalanced_benchmark_shape() {
        return vec![outcome(false, e.clone()), outcome(false, e.clone()), outcome(false, e)];
    }
    let started = Instant::now();
    let logs = run_config(
        "imbalanced.toml",
        &["bralt", "bralt-no-cl", "random", "gradnd-oracle"],
        &scratch.join("imbalanced"),
    );
    let secs = started.elapsed().as_secs_f64();
    let (bralt, bralt_f) = means(&logs, "bralt");
    let (random, random_f) = means(&logs, "random");
    let (oracle, _) = means(&logs, "gradnd-oracle");
    let (no_cl, _) = means(&logs, "bralt-no-cl");
    vec![
        outcome(
            bralt > random && bralt_f >= random_f - 0.01,
            format!(
                "AUBC bralt {bralt:.4} vs random {random:.4}; F-acc bralt {bralt_f:.4} vs random {random_f:.4} ({secs:.0}s for 4 strategies x 5 seeds)"
            ),
        ),
        outcome(
            oracle >= random && bralt >= random - 0.01 && bralt <= oracle + 0.01,
            format!("AUBC oracle {oracle:.4} >= random {random:.4}; bralt {bralt:.4} in [{:.4}, {:.4}]", random - 0.01, oracle + 0.01),
        ),
        outcome(
            bralt >= no_cl - 0.01,
            format!("AUBC bralt {bralt:.4} vs without curriculum {no_cl:.4}"),
        ),
    ]
}

/// Population coefficient of variation.
fn cv(counts: &[usize]) -> f64 {
    let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let m = mean(&xs);
    if m == 0.0 {
        return 0.0;
    }
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt() / m
}

fn criterion_3(scratch: &Path) -> Outcome {
    let cfg = ExperimentConfig::load(&configs_dir().join("longtail.toml")).unwrap();
    if cfg.dataset.imbalance != (ImbalanceSpec::ExponentialLongtail { factor: 10.0 }) {
        return outcome(false, "longtail.toml is not an exponential long tail with factor 10");
    }
    let logs = run_config("longtail.toml", &["bralt"], &scratch.join("longtail"));
    let mut checked = 0;
    let mut worst: Option<(f64, f64, u64, usize)> = None;
    let mut failures = 0;
    for log in &logs {
        for r in &log.records {
            let Some(trust) = &r.selection.trustset_class_counts else {
                continue;
            };
            checked += 1;
            let (t, l) = (cv(trust), cv(&r.labeled_class_counts));
            if t >= 0.25 * l {
                failures += 1;
            }
            let margin = t - 0.25 * l;
            if worst.is_none_or(|w| margin > w.0 - 0.25 * w.1) {
                worst = Some((t, l, log.seed, r.iteration));
            }
        }
    }
    let Some((t, l, seed, it)) = worst else {
        return outcome(false, "no TrustSet counts recorded");
    };
    outcome(
        failures == 0,
        format!(
            "{checked} iterations over {} seeds, {failures} violations; tightest: seed {seed} iteration {it}, TrustSet CV {t:.4} vs labeled CV {l:.4}",
            logs.len()
        ),
    )
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> PointCloud {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    PointCloud::from_rows(&rows).unwrap()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_match = 0.0f64;
    for trial in 0..200 {
        let n = 1 + trial % 4;
        let dim = rng.random_range(1..4);
        let (a, b) = (cloud(&mut rng, n, dim), cloud(&mut rng, n, dim));
        // Uniform equal-size couplings are optimal at permutation vertices.
        let brute = permutations(n)
            .iter()
            .map(|p| (0..n).map(|i| dist(a.point(i), b.point(p[i]))).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min);
        worst_match = worst_match.max((wasserstein(&a, &b).unwrap() - brute).abs());
    }
    let (mut sym, mut tri, mut shift) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..100 {
        let dim = rng.random_range(1..4);
        let (n, m) = (rng.random_range(1..8), rng.random_range(1..8));
        let (a, b) = (cloud(&mut rng, n, dim), cloud(&mut rng, m, dim));
        let ab = wasserstein(&a, &b).unwrap();
        sym = sym.max((ab - wasserstein(&b, &a).unwrap()).abs());
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-100.0..100.0)).collect();
        shift = shift.max((ab - wasserstein(&a.translated(&v), &b.translated(&v)).unwrap()).abs());
        let k = rng.random_range(1..7);
        let (x, y, z) = (cloud(&mut rng, k, dim), cloud(&mut rng, k, dim), cloud(&mut rng, k, dim));
        let excess = wasserstein(&x, &z).unwrap() - wasserstein(&x, &y).unwrap() - wasserstein(&y, &z).unwrap();
        tri = tri.max(excess);
    }
    outcome(
        worst_match <= 1e-9 && sym <= 1e-9 && tri <= 1e-7 && shift <= 1e-9,
        format!(
            "max |exact - enumeration| {worst_match:.2e} over 200 trials; symmetry {sym:.2e}, triangle excess {tri:.2e}, translation {shift:.2e}"
        ),
    )
}

fn superloss_objective(loss: f64, tau: f64, lambda: f64, s: f64) -> f64 {
    (loss - tau) * s.exp() + lambda * s * s
}

/// Best of a 2001-point grid in log sigma, refined by golden section.
fn grid_sigma(loss: f64, tau: f64, lambda: f64) -> f64 {
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let n = 2001;
    let at = |i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let f = |s: f64| superloss_objective(loss, tau, lambda, s);
    let best = (0..n).min_by(|&a, &b| f(at(a)).total_cmp(&f(at(b)))).unwrap();
    let (mut a, mut b) = (at(best.saturating_sub(1)), at((best + 1).min(n - 1)));
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let (c, d) = (b - r * (b - a), a + r * (b - a));
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    [lo, 0.5 * (a + b), hi]
        .into_iter()
        .min_by(|x, y| f(*x).total_cmp(&f(*y)))
        .unwrap()
        .exp()
}

fn criterion_6() -> Outcome {
    let sigma = |loss: f64, tau: f64, lambda: f64| superloss_sigma(loss, &SuperLossConfig { tau, lambda }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut at_tau = 0.0f64;
    let mut pinned = 0.0f64;
    for _ in 0..20 {
        let tau = rng.random_range(0.0..5.0);
        at_tau = at_tau.max((sigma(tau, tau, rng.random_range(0.01..10.0)) - 1.0).abs());
        pinned = pinned.max((sigma(rng.random_range(0.0..6.0), 10f64.ln(), 1e6) - 1.0).abs());
    }
    let mut grid = 0.0f64;
    for _ in 0..100 {
        let (loss, tau, lambda) = (rng.random_range(0.0..6.0), rng.random_range(0.1..4.0), rng.random_range(0.05..20.0));
        grid = grid.max((sigma(loss, tau, lambda) - grid_sigma(loss, tau, lambda)).abs());
    }
    outcome(
        at_tau <= 1e-8 && pinned <= 1e-3 && grid <= 1e-4,
        format!("|sigma(tau) - 1| {at_tau:.2e}; |sigma - 1| at lambda 1e6 {pinned:.2e}; grid gap {grid:.2e} on 100 triples"),
    )
}

/// Mean cross-entropy of relu(x W1 + b1) W2 + b2, written out directly.
fn direct_loss(p: &ModelParams, batch: &[Sample]) -> f64 {
    let mut total = 0.0;
    for s in batch {
        let act: Vec<f64> = if p.hidden == 0 {
            s.features.clone()
        } else {
            (0..p.hidden)
                .map(|j| (p.b1[j] + (0..p.dim).map(|i| s.features[i] * p.w1[i * p.hidden + j]).sum::<f64>()).max(0.0))
                .collect()
        };
        let logits: Vec<f64> = (0..p.classes)
            .map(|c| p.b2[c] + act.iter().enumerate().map(|(j, a)| a * p.w2[j * p.classes + c]).sum::<f64>())
            .collect();
        total += logits.iter().map(|l| l.exp()).sum::<f64>().ln() - logits[s.label];
    }
    total / batch.len() as f64
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let step = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (d, h, c, n) = (rng.random_range(1..=4), rng.random_range(0..=5), rng.random_range(2..=3), rng.random_range(1..=6));
        let mut p = ModelParams::init(d, h, c, rng.random());
        for v in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2] {
            v.iter_mut().for_each(|x| *x = rng.random_range(-1.5..1.5));
        }
        let batch: Vec<Sample> = (0..n)
            .map(|id| Sample {
                id,
                features: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: rng.random_range(0..c),
            })
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let (_, g) = loss_and_grad(&p, &refs, None).unwrap();
        let analytic = [&g.w1, &g.b1, &g.w2, &g.b2];
        for (k, grads) in analytic.iter().enumerate() {
            for (i, &a) in grads.iter().enumerate() {
                let nudged = |delta: f64| {
                    let mut q = p.clone();
                    [&mut q.w1, &mut q.b1, &mut q.w2, &mut q.b2][k][i] += delta;
                    direct_loss(&q, &batch)
                };
                let fd = (nudged(step) - nudged(-step)) / (2.0 * step);
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            }
        }
    }
    outcome(worst < 1e-4, format!("max relative gradient error {worst:.2e} over 50 instances"))
}

fn criterion_8() -> Outcome {
    let rl = RLConfig::default();
    let defaults = (rl.n_env_pairs, rl.steps_per_pair, rl.batch_size, rl.learning_rate);
    if defaults != (30, 20, 100, 0.01) {
        return outcome(false, format!("RL defaults are {defaults:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let dim = 12;
    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let bias = rng.random_range(-1.0..0.0);
    let mut buffer = ReplayBuffer::new();
    buffer.extend((0..300).map(|_| {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let reward = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        Transition {
            state: x[..8].to_vec(),
            action: x[8..].to_vec(),
            reward,
        }
    }));
    let net = train_reward_net(RewardNet::from_config(dim, &rl, 1), &buffer, &rl).unwrap();
    let mse = buffer.mse(&net);
    outcome(mse < 1e-3, format!("final MSE {mse:.2e} on 300 planted linear transitions"))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut flat = 0.0f64;
    for _ in 0..50 {
        let acc = rng.random_range(0.0..1.0);
        let mut frac = 0.0;
        let curve: Vec<(f64, f64)> = (0..rng.random_range(1..10))
            .map(|_| {
                frac += rng.random_range(0.01..0.3);
                (frac, acc)
            })
            .collect();
        flat = flat.max((aubc_of_curve(&curve).unwrap() - acc).abs());
    }
    let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let benches: Vec<BTreeMap<String, Vec<f64>>> = (0..3)
        .map(|_| {
            names
                .iter()
                // Coarse accuracies so ties occur.
                .map(|n| (n.clone(), (0..5).map(|_| rng.random_range(0..5) as f64 / 4.0).collect()))
                .collect()
        })
        .collect();
    let got = penalty_matrix(&names, &benches).unwrap();
    let mut mismatches = 0;
    for i in 0..names.len() {
        for j in 0..names.len() {
            let mut wins = 0u64;
            for b in &benches {
                for t in 0..5 {
                    if i != j && b[&names[i]][t] > b[&names[j]][t] {
                        wins += 1;
                    }
                }
            }
            mismatches += usize::from(got[i][j] != wins);
        }
    }
    outcome(
        flat <= 1e-12 && mismatches == 0,
        format!("constant-curve AUBC error {flat:.2e}; {mismatches} penalty cells differ from pairwise counts"),
    )
}

const DETERMINISM: &str = r#"
strategies = ["bralt", "bralt-no-cl", "bralt-diffset", "random", "entropy", "margin", "coreset", "pseudo-score", "gradnd-oracle"]
seeds = [0, 1, 2]

[dataset]
initial_labeled = 20

[dataset.source]
kind = "generator"
num_classes = 4
dim = 6
per_class = 60
class_sep = 3.0

[dataset.imbalance]
kind = "linear-ratio"
ratios = [1, 2, 3, 4]

[al]
budget = 60
batch = 10

[al.learner]
hidden = 16

[al.rl]
n_env_pairs = 4
steps_per_pair = 5
hidden_width = 32
"#;

fn criterion_10(scratch: &Path) -> Outcome {
    let config = scratch.join("determinism.toml");
    std::fs::write(&config, DETERMINISM).unwrap();
    let once = |name: &str, jobs: usize| {
        let overrides = RunOverrides {
            out: Some(scratch.join(name)),
            jobs: Some(jobs),
            quiet: true,
            ..Default::default()
        };
        std::fs::read(cmd_run(&config, &overrides).unwrap().summary_path).unwrap()
    };
    let (a, b) = (once("first", 1), once("second", 2));
    outcome(
        a == b,
        format!("two runs of 9 strategies x 3 seeds: summaries of {} and {} bytes, identical: {}", a.len(), b.len(), a == b),
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        println!("criterion {n:>2}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    let mut heavy = criteria_1_2_4(scratch.path()).into_iter();
    report(1, heavy.next().unwrap());
    report(2, heavy.next().unwrap());
    report(3, criterion_3(scratch.path()));
    report(4, heavy.next().unwrap());
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());
    report(8, criterion_8());
    report(9, criterion_9());
    report(10, criterion_10(scratch.path()));
    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
