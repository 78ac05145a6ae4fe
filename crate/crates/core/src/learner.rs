//! The target classifier: input -> ReLU hidden layer -> softmax, trained from
//! scratch with mini-batch SGD (momentum, weight decay). A hidden width of
//! zero gives plain softmax regression.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{arg_err, Error, Result};
use crate::rng_from;
use crate::trustset::{superloss_sigma, SuperLossConfig};

/// Probabilities below this are treated as this value by [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    PlainCe,
    /// Each sample's gradient is scaled by its SuperLoss weight.
    Superloss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// SuperLoss regularization weight, used with [`LossMode::Superloss`].
    pub superloss_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            loss_mode: LossMode::PlainCe,
            superloss_lambda: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return arg_err("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return arg_err("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return arg_err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return arg_err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return arg_err("weight_decay must be >= 0");
        }
        if self.loss_mode == LossMode::Superloss && !(self.superloss_lambda > 0.0) {
            return arg_err("superloss_lambda must be positive");
        }
        Ok(())
    }
}

/// Weights of the target model. Matrices are row-major: `w1` is `dim x hidden`,
/// `w2` is `hidden x classes` (or `dim x classes` when `hidden == 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dim: usize, hidden: usize, classes: usize) -> Self {
        let top_in = if hidden == 0 { dim } else { hidden };
        Self {
            dim,
            hidden,
            classes,
            w1: vec![0.0; dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; top_in * classes],
            b2: vec![0.0; classes],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut p = Self::zeros(dim, hidden, classes);
        let mut rng = rng_from(seed, 10);
        let mut fill = |xs: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for x in xs {
                *x = rng.random_range(-bound..bound);
            }
        };
        fill(&mut p.w1, dim);
        fill(&mut p.b1, dim);
        let top_in = p.top_in();
        fill(&mut p.w2, top_in);
        fill(&mut p.b2, top_in);
        p
    }

    fn top_in(&self) -> usize {
        if self.hidden == 0 {
            self.dim
        } else {
            self.hidden
        }
    }

    /// Width of [`features`] output.
    pub fn feature_dim(&self) -> usize {
        self.top_in()
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn slices_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return arg_err(format!("feature dimension {} != model dimension {}", x.len(), self.dim));
        }
        Ok(())
    }

    /// Hidden activations (post-ReLU), or the input itself when `hidden == 0`.
    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        if self.hidden == 0 {
            return x.to_vec();
        }
        let mut z = self.b1.clone();
        for (xi, row) in x.iter().zip(self.w1.chunks_exact(self.hidden)) {
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += xi * w;
            }
        }
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        z
    }

    fn logits_from_hidden(&self, a: &[f64]) -> Vec<f64> {
        let mut out = self.b2.clone();
        for (ai, row) in a.iter().zip(self.w2.chunks_exact(self.classes)) {
            if *ai == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += ai * w;
            }
        }
        out
    }
}

pub fn logits(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    params.check_dim(x)?;
    Ok(params.logits_from_hidden(&params.hidden_act(x)))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn predict_proba(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&logits(params, x)?))
}

/// `-ln(probs[label])`, capped at `-ln(1e-30)`.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Penultimate-layer activations.
pub fn features(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    params.check_dim(x)?;
    Ok(params.hidden_act(x))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy<'a>(
    params: &ModelParams,
    samples: impl IntoIterator<Item = &'a Sample>,
) -> Result<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for s in samples {
        total += 1;
        if argmax(&logits(params, &s.features)?) == s.label {
            correct += 1;
        }
    }
    if total == 0 {
        return arg_err("accuracy of an empty sample set");
    }
    Ok(correct as f64 / total as f64)
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn slices(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Weighted mean cross-entropy `sum_i w_i * ce_i / n` and its gradient.
/// `weights = None` means all ones.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[&Sample],
    weights: Option<&[f64]>,
) -> Result<(f64, Gradients)> {
    let z = ModelParams::zeros(params.dim, params.hidden, params.classes);
    let mut g = Gradients {
        w1: z.w1,
        b1: z.b1,
        w2: z.w2,
        b2: z.b2,
    };
    if batch.is_empty() {
        return Ok((0.0, g));
    }
    let n = batch.len() as f64;
    let (h, c) = (params.hidden, params.classes);
    let mut loss = 0.0;
    for (i, s) in batch.iter().enumerate() {
        params.check_dim(&s.features)?;
        let w = weights.map_or(1.0, |ws| ws[i]) / n;
        let a = params.hidden_act(&s.features);
        let probs = softmax(&params.logits_from_hidden(&a));
        loss += w * cross_entropy(&probs, s.label);

        // dL/dlogits = w * (p - onehot)
        let mut dlog = probs;
        dlog[s.label] -= 1.0;
        dlog.iter_mut().for_each(|v| *v *= w);
        for (gb, d) in g.b2.iter_mut().zip(&dlog) {
            *gb += d;
        }
        for (ai, grow) in a.iter().zip(g.w2.chunks_exact_mut(c)) {
            for (gw, d) in grow.iter_mut().zip(&dlog) {
                *gw += ai * d;
            }
        }
        if h == 0 {
            continue;
        }
        let mut da = vec![0.0; h];
        for (j, (dj, wrow)) in da.iter_mut().zip(params.w2.chunks_exact(c)).enumerate() {
            if a[j] > 0.0 {
                *dj = wrow.iter().zip(&dlog).map(|(w, d)| w * d).sum();
            }
        }
        for (gb, d) in g.b1.iter_mut().zip(&da) {
            *gb += d;
        }
        for (xi, grow) in s.features.iter().zip(g.w1.chunks_exact_mut(h)) {
            for (gw, d) in grow.iter_mut().zip(&da) {
                *gw += xi * d;
            }
        }
    }
    Ok((loss, g))
}

/// Trains a fresh model on `samples` for exactly `config.epochs` epochs.
pub fn train_from_scratch(
    samples: &[&Sample],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<ModelParams> {
    config.validate()?;
    if samples.is_empty() {
        return arg_err("cannot train on an empty labeled set");
    }
    let dim = samples[0].features.len();
    let mut params = ModelParams::init(dim, config.hidden, num_classes, config.seed);
    let sl = SuperLossConfig::for_classes(num_classes, config.superloss_lambda);

    let mut velocity = ModelParams::zeros(dim, config.hidden, num_classes);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_from(config.seed, 1000 + epoch as u64));
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let weights = match config.loss_mode {
                LossMode::PlainCe => None,
                LossMode::Superloss => Some(superloss_weights(&params, &batch, &sl)?),
            };
            let (loss, grad) = loss_and_grad(&params, &batch, weights.as_deref())?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}"
                )));
            }
            sgd_step(&mut params, &mut velocity, &grad, config);
        }
    }
    if !params.is_finite() {
        return Err(Error::Numeric("training produced non-finite parameters".into()));
    }
    Ok(params)
}

/// Per-sample SuperLoss weights for a batch, normalized to mean one.
fn superloss_weights(
    params: &ModelParams,
    batch: &[&Sample],
    sl: &SuperLossConfig,
) -> Result<Vec<f64>> {
    let mut ws = Vec::with_capacity(batch.len());
    for s in batch {
        let loss = cross_entropy(&predict_proba(params, &s.features)?, s.label);
        ws.push(superloss_sigma(loss, sl)?);
    }
    let mean = ws.iter().sum::<f64>() / ws.len() as f64;
    ws.iter_mut().for_each(|w| *w /= mean);
    Ok(ws)
}

fn sgd_step(params: &mut ModelParams, velocity: &mut ModelParams, grad: &Gradients, cfg: &TrainConfig) {
    let decayed = [true, false, true, false];
    for (((p, v), g), decay) in params
        .slices_mut()
        .into_iter()
        .zip(velocity.slices_mut())
        .zip(grad.slices())
        .zip(decayed)
    {
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
            let mut step = *gi;
            if decay {
                step += cfg.weight_decay * *pi;
            }
            *vi = cfg.momentum * *vi + step;
            *pi -= cfg.learning_rate * *vi;
        }
    }
}
