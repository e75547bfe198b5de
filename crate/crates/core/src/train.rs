//! Losses, learning-rate schedule, Adam, batching and the training loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::{spec_augment, FeatureMatrix, SpecAugmentConfig};
use crate::error::{usage, Error, Result};
use crate::model::{ContextInput, ContextMode, Fwd, Model, MIN_FRAMES};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::{BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub batch_pairs: usize,
    pub label_smoothing: f64,
    pub alpha: f64,
    pub max_audio_s: f64,
    pub freeze_encoder: bool,
    pub steps: usize,
    pub spec_augment: Option<SpecAugmentConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 3e-4,
            lr_peak: 5e-4,
            warmup_steps: 500,
            batch_pairs: 32,
            label_smoothing: 0.1,
            alpha: 0.04,
            max_audio_s: 20.0,
            freeze_encoder: false,
            steps: 1000,
            spec_augment: Some(SpecAugmentConfig::default()),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > 0.0 && self.lr_start <= self.lr_peak) {
            return usage("need 0 < lr_start <= lr_peak");
        }
        if self.alpha < 0.0 {
            return usage(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return usage("label smoothing must be in [0, 1)");
        }
        if self.batch_pairs == 0 {
            return usage("batch_pairs must be >= 1");
        }
        Ok(())
    }
}

/// Linear warm-up from `lr_start` to `lr_peak`, then inverse square root decay.
pub fn lr_schedule(cfg: &TrainConfig, step: usize) -> f64 {
    let w = cfg.warmup_steps;
    if w == 0 {
        return cfg.lr_peak * if step == 0 { 1.0 } else { 1.0 / (step as f64).sqrt() };
    }
    if step < w {
        cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step as f64 / w as f64
    } else {
        cfg.lr_peak * (w as f64 / step as f64).sqrt()
    }
}

/// Token-averaged label-smoothed cross entropy. `mask[i] == false` marks
/// position `i` as padding; `None` keeps every position.
pub fn label_smoothed_ce(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    eps: f64,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let keep: Vec<usize> = (0..targets.len())
        .filter(|&i| mask.map_or(true, |m| m.get(i).copied().unwrap_or(false)))
        .collect();
    if keep.is_empty() {
        return usage("every target position is padding");
    }
    let rows = g.shape(logits).first().copied().unwrap_or(0);
    let (logits, kept) = if keep.len() == targets.len() {
        (logits, targets.to_vec())
    } else {
        let mut sel = vec![0.0; keep.len() * rows];
        for (r, &i) in keep.iter().enumerate() {
            sel[r * rows + i] = 1.0;
        }
        let sel = g.constant(Tensor::new(vec![keep.len(), rows], sel)?)?;
        (g.matmul(sel, logits)?, keep.iter().map(|&i| targets[i]).collect())
    };
    let sum = g.smoothed_cross_entropy(logits, &kept, eps)?;
    Ok(g.scale(sum, 1.0 / kept.len() as f64)?)
}

/// `Σ_layers mean(1 - λ)`; `None` when there are no gates.
pub fn gate_penalty(g: &mut Graph, lambdas: &[Var]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &l in lambdas {
        let one_minus = g.affine(l, -1.0, 1.0)?;
        let m = g.mean(one_minus)?;
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total)
}

/// `L' = L + α · Σ_layers mean(1 - λ)`.
pub fn gate_regularized_loss(
    g: &mut Graph,
    loss: Var,
    lambdas: &[Var],
    alpha: f64,
    mode: ContextMode,
) -> Result<Var> {
    if mode == ContextMode::None && alpha > 0.0 {
        return usage("gate regularization needs a context model (no gates without context)");
    }
    if alpha == 0.0 {
        return Ok(loss);
    }
    match gate_penalty(g, lambdas)? {
        Some(p) => {
            let p = g.scale(p, alpha)?;
            Ok(g.add(loss, p)?)
        }
        None => Ok(loss),
    }
}

/// Bias-corrected Adam. State exists only for parameters it has updated.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.state.contains_key(&id)
    }

    /// Applies the accumulated gradients of every trainable parameter. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in parameter {}", p.name)));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let (m, v) = self.state.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let g = p.grad.data();
            let mut upd = vec![0.0; n];
            for k in 0..n {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                upd[k] = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
            for (x, u) in p.value.data_mut().iter_mut().zip(upd) {
                *x -= u;
            }
        }
        Ok(())
    }
}

/// A training pair with its context. Feature matrices are shared so the
/// audio context of one sample can be the source of another.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub key: String,
    pub features: Arc<FeatureMatrix>,
    /// Target subword ids without framing.
    pub target: Vec<usize>,
    pub ctx_text: Vec<usize>,
    pub ctx_audio: Option<Arc<FeatureMatrix>>,
    pub duration_s: f64,
}

impl TrainSample {
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.target.iter().copied()).collect()
    }

    pub fn decoder_output(&self) -> Vec<usize> {
        self.target.iter().copied().chain(std::iter::once(EOS)).collect()
    }

    pub fn context(&self, mode: ContextMode) -> ContextInput<'_> {
        match mode {
            ContextMode::None => ContextInput::None,
            ContextMode::Text => ContextInput::Text(&self.ctx_text),
            ContextMode::Audio => match &self.ctx_audio {
                Some(f) if f.frames >= MIN_FRAMES => ContextInput::Audio(f),
                _ => ContextInput::None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batches {
    pub batches: Vec<Vec<usize>>,
    pub dropped: usize,
}

/// Drops samples longer than `max_audio_s`, shuffles the rest and cuts them
/// into batches of `batch_pairs` (the last may be smaller).
pub fn make_batches(samples: &[TrainSample], cfg: &TrainConfig, rng: &mut Rng) -> Result<Batches> {
    let mut keep: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].duration_s <= cfg.max_audio_s && samples[i].features.frames >= MIN_FRAMES)
        .collect();
    let dropped = samples.len() - keep.len();
    if dropped > 0 {
        log::info!("dropped {dropped} samples longer than {} s or too short", cfg.max_audio_s);
    }
    if keep.is_empty() {
        return usage("no training samples left after length filtering");
    }
    keep.shuffle(rng);
    Ok(Batches {
        batches: keep.chunks(cfg.batch_pairs.max(1)).map(<[usize]>::to_vec).collect(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_prime")]
    pub loss_prime: f64,
    pub mean_lambda_per_layer: Vec<f64>,
}

/// Sums per-sample contributions to a batch's token-averaged losses.
#[derive(Default)]
struct BatchStats {
    ce: f64,
    penalty: f64,
    lambda_sum: Vec<f64>,
    lambda_count: Vec<f64>,
}

/// Forward and (optionally) backward for one sample, scaled so that summing
/// over the batch gives the token-averaged batch loss. Training mode (with an
/// rng) applies SpecAugment and dropout.
fn sample_pass(
    model: &Model,
    sample: &TrainSample,
    cfg: &TrainConfig,
    batch_tokens: usize,
    rng: Option<&mut Rng>,
    stats: &mut BatchStats,
) -> Result<Option<crate::tensor::Gradients>> {
    match (rng, &cfg.spec_augment) {
        (Some(r), Some(sa)) => {
            let f = spec_augment(&sample.features, r, sa);
            run_pass(model, sample, &f, cfg, batch_tokens, Some(r), stats)
        }
        (r, _) => run_pass(model, sample, &sample.features, cfg, batch_tokens, r, stats),
    }
}

fn run_pass(
    model: &Model,
    sample: &TrainSample,
    features: &FeatureMatrix,
    cfg: &TrainConfig,
    batch_tokens: usize,
    rng: Option<&mut Rng>,
    stats: &mut BatchStats,
) -> Result<Option<crate::tensor::Gradients>> {
    let train = rng.is_some();
    let mut fwd = match rng {
        Some(r) => Fwd::train(&model.params, model.config.dropout, r),
        None => Fwd::eval(&model.params),
    };
    let dec_out = sample.decoder_output();
    let out = model.forward(
        &mut fwd,
        features,
        sample.context(model.config.context_mode),
        &sample.decoder_input(),
    )?;
    let g = &mut fwd.g;
    let n = batch_tokens as f64;
    let ce = g.smoothed_cross_entropy(out.logits, &dec_out, cfg.label_smoothing)?;
    let mut loss = g.scale(ce, 1.0 / n)?;
    stats.ce += g.value(loss).item();
    if stats.lambda_sum.len() < out.lambdas.len() {
        stats.lambda_sum.resize(out.lambdas.len(), 0.0);
        stats.lambda_count.resize(out.lambdas.len(), 0.0);
    }
    for (i, &l) in out.lambdas.iter().enumerate() {
        let t = g.value(l);
        stats.lambda_sum[i] += t.data().iter().sum::<f64>();
        stats.lambda_count[i] += t.len() as f64;
        let d = t.shape()[1] as f64;
        let one_minus = g.affine(l, -1.0, 1.0)?;
        let s = g.sum(one_minus)?;
        let term = g.scale(s, cfg.alpha / (n * d))?;
        stats.penalty += g.value(term).item();
        if cfg.alpha > 0.0 {
            loss = g.add(loss, term)?;
        }
    }
    if !train {
        return Ok(None);
    }
    Ok(Some(g.backward(loss)?))
}

/// Owns optimiser state and randomness across steps.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub step: usize,
    rng: Rng,
    queue: Vec<Vec<usize>>,
}

impl Trainer {
    pub fn new(model: &mut Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.config.context_mode == ContextMode::None && cfg.alpha > 0.0 {
            return usage("alpha > 0 needs a context model (no gates without context)");
        }
        if cfg.freeze_encoder {
            model.freeze_encoder();
        }
        let rng = rng::stream(cfg.seed, "train");
        Ok(Trainer {
            cfg,
            adam: Adam::new(),
            step: 0,
            rng,
            queue: Vec::new(),
        })
    }

    fn next_batch(&mut self, data: &[TrainSample]) -> Result<Vec<usize>> {
        if self.queue.is_empty() {
            let mut b = make_batches(data, &self.cfg, &mut self.rng)?.batches;
            b.reverse();
            self.queue = b;
        }
        Ok(self.queue.pop().expect("make_batches never returns zero batches"))
    }

    /// One optimiser step on the next batch.
    pub fn train_step(&mut self, model: &mut Model, data: &[TrainSample]) -> Result<StepLog> {
        let batch = self.next_batch(data)?;
        let tokens: usize = batch.iter().map(|&i| data[i].target.len() + 1).sum();
        model.params.zero_grad();
        let mut stats = BatchStats::default();
        for &i in &batch {
            let grads = sample_pass(model, &data[i], &self.cfg, tokens, Some(&mut self.rng), &mut stats)?
                .expect("training pass returns gradients");
            model.params.accumulate(&grads, 1.0);
        }
        self.step += 1;
        let lr = lr_schedule(&self.cfg, self.step);
        self.adam.step(&mut model.params, lr)?;
        Ok(StepLog {
            step: self.step,
            lr,
            loss: stats.ce,
            loss_prime: stats.ce + stats.penalty,
            mean_lambda_per_layer: stats
                .lambda_sum
                .iter()
                .zip(&stats.lambda_count)
                .map(|(s, c)| s / c)
                .collect(),
        })
    }

    /// Runs `cfg.steps` steps, reporting each.
    pub fn run(
        &mut self,
        model: &mut Model,
        data: &[TrainSample],
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let log = self.train_step(model, data)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Evaluation-mode `(L, L')` over a data set, token-averaged.
pub fn validation_loss(model: &Model, data: &[TrainSample], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let tokens: usize = data.iter().map(|s| s.target.len() + 1).sum();
    if tokens == 0 {
        return usage("empty validation set");
    }
    let mut stats = BatchStats::default();
    let cfg = TrainConfig {
        spec_augment: None,
        ..cfg.clone()
    };
    for s in data.iter().filter(|s| s.features.frames >= MIN_FRAMES) {
        sample_pass(model, s, &cfg, tokens, None, &mut stats)?;
    }
    Ok((stats.ce, stats.ce + stats.penalty))
}

#[cfg(test)]
mod tests;
