//! Teacher-forced cross-entropy, the strength-regularized fine-tuning
//! objective, Adam, clipping, the halving schedule and length-sorted batches.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, Mode};
use crate::data::{CorpusPair, TokenId, EOS, PAD};
use crate::decoding::{forced_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{decoder_step, embed_bos, embed_target, encode, initial_state, output_logits, AttentionKind, Model};
use crate::tensor::{Tape, Tensor, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// First (1-based) epoch trained at half the previous rate.
    pub halve_from_epoch: usize,
    pub clip_norm: f64,
    pub beta: f64,
    pub finetune_epochs: usize,
    /// Dev pairs decoded for model selection after each epoch (0 = all).
    pub dev_eval_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 1e-4,
            epochs: 30,
            halve_from_epoch: 20,
            clip_norm: 3.0,
            beta: 0.1,
            finetune_epochs: 1,
            dev_eval_size: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be > 0");
        }
        if self.halve_from_epoch == 0 {
            return bad("halve_from_epoch must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be >= 0");
        }
        if self.finetune_epochs == 0 {
            return bad("finetune_epochs must be > 0");
        }
        Ok(())
    }

    /// Rate for 1-based `epoch`: halved once per epoch from `halve_from_epoch` on.
    /// A value past `epochs` keeps the rate constant.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        if epoch >= self.halve_from_epoch {
            self.lr * 0.5f64.powi((epoch - self.halve_from_epoch + 1) as i32)
        } else {
            self.lr
        }
    }

    /// Rate of the last main-training epoch, reused for fine-tuning.
    pub fn final_lr(&self) -> f64 {
        self.epoch_lr(self.epochs)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("halve_from_epoch", self.halve_from_epoch.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("beta", self.beta.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("dev_eval_size", self.dev_eval_size.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "halve_from_epoch" => self.halve_from_epoch = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "finetune_epochs" => self.finetune_epochs = num(key, value)?,
            "dev_eval_size" => self.dev_eval_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key '{key}'"))),
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// First/second moments per parameter and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

fn check_aligned(params: &[Tensor], grads: &[Vec<f64>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Config(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Config(format!("parameter {i}: gradient has {} entries, expected {}", g.len(), p.len())));
        }
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    check_aligned(params, grads)?;
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::Config("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((x, &g), m), v) in p.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales all gradients when their global L2 norm exceeds `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], clip_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip_norm {
        let k = clip_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

// ---------------------------------------------------------------------------
// Batches

/// Padded mini-batch; masks are false on PAD positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: Vec<Vec<TokenId>>,
    pub target: Vec<Vec<TokenId>>,
    pub source_mask: Vec<Vec<bool>>,
    pub target_mask: Vec<Vec<bool>>,
}

fn pad(rows: Vec<Vec<TokenId>>) -> (Vec<Vec<TokenId>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let masks = rows.iter().map(|r| (0..width).map(|i| i < r.len()).collect()).collect();
    let padded = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (padded, masks)
}

impl Batch {
    pub fn from_pairs(pairs: &[&CorpusPair]) -> Self {
        let (source, source_mask) = pad(pairs.iter().map(|p| p.source.clone()).collect());
        let (target, target_mask) = pad(pairs.iter().map(|p| p.target.clone()).collect());
        Batch {
            source,
            target,
            source_mask,
            target_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Unpadded `(source, target)` of sample `i`.
    pub fn sample(&self, i: usize) -> (Vec<TokenId>, Vec<TokenId>) {
        let keep = |row: &[TokenId], mask: &[bool]| row.iter().zip(mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        (keep(&self.source[i], &self.source_mask[i]), keep(&self.target[i], &self.target_mask[i]))
    }
}

/// Sorts by source length (stable), chunks into batches and shuffles the
/// batch order with `seed`.
pub fn make_batches(pairs: &[CorpusPair], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be > 0".into()));
    }
    let mut order: Vec<&CorpusPair> = pairs.iter().collect();
    order.sort_by_key(|p| p.source.len());
    let mut batches: Vec<Batch> = order.chunks(batch_size).map(Batch::from_pairs).collect();
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(batches)
}

// ---------------------------------------------------------------------------
// Objectives

/// Per-sample objective on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub loss: Var,
    pub cross_entropy: f64,
    pub strength_sum: f64,
    pub steps: usize,
}

/// `-log p(y|x)` under teacher forcing, minus `beta · mean_t g(t)` when
/// `beta` is given (flexible models only). `target` must end with EOS.
pub fn sample_loss(tape: &Tape<'_>, model: &Model, source: &[TokenId], target: &[TokenId], beta: Option<f64>) -> Result<SampleLoss> {
    if beta.is_some() && model.kind() != AttentionKind::Flexible {
        return Err(Error::UnsupportedMode("finetune_loss"));
    }
    if target.last() != Some(&EOS) {
        return Err(Error::Config("target must end with EOS".into()));
    }
    let enc = encode(tape, model, source)?;
    let mut state = initial_state(tape, model);
    let mut feedback = embed_bos(tape, model)?;
    let mut focus = None;
    let mut ce_terms = Vec::with_capacity(target.len());
    let mut strengths = Vec::with_capacity(target.len());
    for (t, &gold) in target.iter().enumerate() {
        let att = attend(tape, model, state.hidden, feedback, &enc, focus, Mode::Train, t + 1)?;
        state = decoder_step(tape, model, state, feedback, att.context)?;
        let logits = output_logits(tape, model, state)?;
        ce_terms.push(tape.cross_entropy(logits, gold)?);
        strengths.extend(att.strength);
        focus = Some(att.focus);
        feedback = embed_target(tape, model, gold)?;
    }
    let ce = sum_all(tape, &ce_terms)?;
    let cross_entropy = tape.scalar(ce);
    let strength_sum = strengths.iter().map(|&g| tape.scalar(g)).sum();
    let loss = match beta {
        Some(b) if !strengths.is_empty() => {
            let mean_g = tape.scale(sum_all(tape, &strengths)?, 1.0 / target.len() as f64)?;
            tape.sub(ce, tape.scale(mean_g, b)?)?
        }
        _ => ce,
    };
    Ok(SampleLoss {
        loss,
        cross_entropy,
        strength_sum,
        steps: target.len(),
    })
}

/// `ce - beta · mean(strengths)` on plain values.
pub fn finetune_objective(cross_entropy: f64, strengths: &[f64], beta: f64) -> f64 {
    if strengths.is_empty() {
        return cross_entropy;
    }
    cross_entropy - beta * strengths.iter().sum::<f64>() / strengths.len() as f64
}

fn sum_all(tape: &Tape<'_>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn batch_objective(model: &Model, batch: &Batch, beta: Option<f64>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total = 0.0;
    for i in 0..batch.len() {
        let (src, tgt) = batch.sample(i);
        let tape = model.tape();
        let s = sample_loss(&tape, model, &src, &tgt, beta)?;
        total += tape.scalar(s.loss);
    }
    Ok(total / batch.len() as f64)
}

/// Mean over samples of the summed token cross-entropy.
pub fn cross_entropy(model: &Model, batch: &Batch) -> Result<f64> {
    batch_objective(model, batch, None)
}

/// Mean over samples of `CE - beta · mean_t g(t)`.
pub fn finetune_loss(model: &Model, batch: &Batch, beta: f64) -> Result<f64> {
    if model.kind() != AttentionKind::Flexible {
        return Err(Error::UnsupportedMode("finetune_loss"));
    }
    batch_objective(model, batch, Some(beta))
}

/// Objective value and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub strength_sum: f64,
    pub strength_steps: usize,
}

pub fn batch_gradients(model: &Model, batch: &Batch, beta: Option<f64>) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut grads: Vec<Vec<f64>> = model.params.tensors().iter().map(|p| vec![0.0; p.len()]).collect();
    let k = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut strength_sum = 0.0;
    let mut strength_steps = 0;
    for i in 0..batch.len() {
        let (src, tgt) = batch.sample(i);
        let tape = model.tape();
        let s = sample_loss(&tape, model, &src, &tgt, beta)?;
        loss += tape.scalar(s.loss) * k;
        if model.kind() == AttentionKind::Flexible {
            strength_sum += s.strength_sum;
            strength_steps += s.steps;
        }
        let g = tape.backward(s.loss)?;
        for (p, acc) in grads.iter_mut().enumerate() {
            if let Some(gp) = g.param(p) {
                acc.iter_mut().zip(gp).for_each(|(a, &x)| *a += k * x);
            }
        }
    }
    Ok(BatchGradients {
        loss,
        grads,
        strength_sum,
        strength_steps,
    })
}

// ---------------------------------------------------------------------------
// Training loop

/// One structured line per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_bleu: f64,
    pub dev_accuracy: f64,
    pub dev_mean_g: Option<f64>,
}

impl EpochLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

/// Best-so-far snapshot, ranked by dev BLEU then dev accuracy.
#[derive(Debug, Clone)]
pub struct Selected {
    pub model: Model,
    pub epoch: usize,
    pub bleu: f64,
    pub accuracy: f64,
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<Selected>,
    pub log: Vec<EpochLog>,
}

fn dev_slice<'a>(dev: &'a [CorpusPair], config: &TrainConfig) -> &'a [CorpusPair] {
    match config.dev_eval_size {
        0 => dev,
        n => &dev[..n.min(dev.len())],
    }
}

/// Shuffle seed of a given epoch; fine-tuning epochs continue the count.
pub fn epoch_seed(config: &TrainConfig, epoch: usize) -> u64 {
    config.seed.wrapping_add(epoch as u64)
}

/// One pass over `train` in the batch order seeded for `epoch`; returns the
/// mean per-sample objective.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    train: &[CorpusPair],
    config: &TrainConfig,
    epoch: usize,
    lr: f64,
    beta: Option<f64>,
) -> Result<f64> {
    let batches = make_batches(train, config.batch_size, epoch_seed(config, epoch))?;
    let mut total = 0.0;
    for (b, batch) in batches.iter().enumerate() {
        let mut bg = batch_gradients(model, batch, beta).map_err(|e| match e {
            Error::Tensor(t) => Error::Diverged {
                epoch,
                batch: b,
                detail: t.to_string(),
            },
            other => other,
        })?;
        if !bg.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: b,
                detail: format!("loss {}", bg.loss),
            });
        }
        clip_gradients(&mut bg.grads, config.clip_norm);
        adam_step(model.params.tensors_mut(), &bg.grads, adam, lr)?;
        total += bg.loss * batch.len() as f64;
    }
    Ok(total / train.len() as f64)
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params.tensors());
        Ok(Trainer {
            model,
            adam,
            config,
            epoch: 0,
            best: None,
            log: Vec::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Trains one epoch, evaluates greedily on `dev` at `τ = ∞` and updates
    /// the best snapshot.
    pub fn step_epoch(&mut self, train: &[CorpusPair], dev: &[CorpusPair]) -> Result<&EpochLog> {
        let epoch = self.epoch + 1;
        let lr = self.config.epoch_lr(epoch);
        let loss = train_epoch(&mut self.model, &mut self.adam, train, &self.config, epoch, lr, None)?;
        let report = evaluate(&self.model, dev_slice(dev, &self.config), &DecodeConfig::greedy(f64::INFINITY))?;
        self.epoch = epoch;
        let better = self
            .best
            .as_ref()
            .is_none_or(|b| report.bleu > b.bleu || (report.bleu == b.bleu && report.seq_accuracy > b.accuracy));
        if better {
            self.best = Some(Selected {
                model: self.model.clone(),
                epoch,
                bleu: report.bleu,
                accuracy: report.seq_accuracy,
            });
        }
        self.log.push(EpochLog {
            phase: "train".into(),
            epoch,
            lr,
            train_loss: loss,
            dev_bleu: report.bleu,
            dev_accuracy: report.seq_accuracy,
            dev_mean_g: report.mean_g,
        });
        Ok(self.log.last().expect("just pushed"))
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, train: &[CorpusPair], dev: &[CorpusPair], mut on_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        if dev.is_empty() {
            return Err(Error::Empty("dev corpus"));
        }
        while !self.finished() {
            self.step_epoch(train, dev)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn best_model(&self) -> &Model {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best dev BLEU (accuracy breaks ties).
    pub model: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub log: Vec<EpochLog>,
}

pub fn train(model: Model, train_pairs: &[CorpusPair], dev: &[CorpusPair], config: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, config.clone())?;
    t.run(train_pairs, dev, |_| Ok(()))?;
    let best = t.best.clone().expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: best.model,
        best_epoch: best.epoch,
        last: t.model,
        log: t.log,
    })
}

/// Mean `g(t)` over every teacher-forced step of `pairs` at `τ = ∞`.
pub fn held_out_mean_strength(model: &Model, pairs: &[CorpusPair]) -> Result<f64> {
    if model.kind() != AttentionKind::Flexible {
        return Err(Error::UnsupportedMode("held_out_mean_strength"));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("held-out corpus"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for p in pairs {
        let trace = forced_decode(model, &p.source, &p.target, f64::INFINITY)?;
        for g in trace.steps.iter().filter_map(|s| s.strength) {
            sum += g;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub mean_g_before: f64,
    pub mean_g_after: f64,
    pub log: Vec<EpochLog>,
}

/// `finetune_epochs` epochs of the regularized objective at the final
/// main-training rate, with fresh optimizer moments. Mean `g(t)` is
/// measured on `held_out` before and after.
pub fn finetune(model: Model, train_pairs: &[CorpusPair], held_out: &[CorpusPair], config: &TrainConfig) -> Result<FinetuneOutcome> {
    config.validate()?;
    if model.kind() != AttentionKind::Flexible {
        return Err(Error::UnsupportedMode("finetune"));
    }
    if train_pairs.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let mean_g_before = held_out_mean_strength(&model, held_out)?;
    let mut model = model;
    let mut adam = AdamState::new(model.params.tensors());
    let lr = config.final_lr();
    let mut log = Vec::new();
    for e in 1..=config.finetune_epochs {
        let epoch = config.epochs + e;
        let loss = train_epoch(&mut model, &mut adam, train_pairs, config, epoch, lr, Some(config.beta))?;
        let report = evaluate(&model, dev_slice(held_out, config), &DecodeConfig::greedy(f64::INFINITY))?;
        log.push(EpochLog {
            phase: "finetune".into(),
            epoch: e,
            lr,
            train_loss: loss,
            dev_bleu: report.bleu,
            dev_accuracy: report.seq_accuracy,
            dev_mean_g: report.mean_g,
        });
    }
    let mean_g_after = held_out_mean_strength(&model, held_out)?;
    Ok(FinetuneOutcome {
        model,
        mean_g_before,
        mean_g_after,
        log,
    })
}
