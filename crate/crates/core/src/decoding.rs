//! Beam, greedy and forced decoding with per-step window metering.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionStep, Mode, Window};
use crate::data::{CorpusPair, TokenId, EOS};
use crate::error::{Error, Result};
use crate::model::{decoder_step, embed_bos, embed_target, encode, initial_state, output_logits, DecoderState, Model};
use crate::tensor::{Tape, Var};

/// Decoding settings shared by beam search and corpus evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub tau: f64,
    /// Defaults to `2·S + 5` when `None`.
    pub max_out: Option<usize>,
}

impl DecodeConfig {
    pub fn new(beam: usize, tau: f64) -> Self {
        DecodeConfig { beam, tau, max_out: None }
    }

    pub fn greedy(tau: f64) -> Self {
        Self::new(1, tau)
    }

    fn max_out_for(&self, len: usize) -> usize {
        self.max_out.unwrap_or(2 * len + 5)
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig::new(5, f64::INFINITY)
    }
}

/// One live beam entry. Tape handles refer to the decode's own tape.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub state: DecoderState,
    pub focus: Option<Var>,
    feedback: Var,
    steps: Vec<AttentionStep>,
}

impl Hypothesis {
    pub fn steps(&self) -> &[AttentionStep] {
        &self.steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Emitted tokens without the final EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub completed: bool,
    pub source_len: usize,
    /// Attention records along the returned hypothesis.
    pub steps: Vec<AttentionStep>,
    /// Window of every active hypothesis at every step.
    pub step_windows: Vec<Vec<Window>>,
    /// Σ window widths over all (step, active hypothesis).
    pub score_evals: u64,
    /// Score-function invocations counted by the tape itself.
    pub score_calls: u64,
    pub duration: Duration,
}

impl DecodeTrace {
    pub fn hypothesis_steps(&self) -> usize {
        self.step_windows.iter().map(Vec::len).sum()
    }

    /// `Σ widths / Σ active hypotheses`; 0 for an empty trace.
    pub fn avg_window(&self) -> f64 {
        let n = self.hypothesis_steps();
        if n == 0 {
            0.0
        } else {
            self.score_evals as f64 / n as f64
        }
    }

    /// Mean `g(t)` along the returned hypothesis, if the model has one.
    pub fn mean_strength(&self) -> Option<f64> {
        let gs: Vec<f64> = self.steps.iter().filter_map(|s| s.strength).collect();
        if gs.is_empty() {
            None
        } else {
            Some(gs.iter().sum::<f64>() / gs.len() as f64)
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

struct Expansion {
    state: DecoderState,
    focus: Var,
    record: AttentionStep,
    log_probs: Vec<f64>,
}

fn expand(tape: &Tape<'_>, model: &Model, hyp: &Hypothesis, enc: &crate::model::EncoderStates, mode: Mode, step: usize) -> Result<Expansion> {
    let att = attend(tape, model, hyp.state.hidden, hyp.feedback, enc, hyp.focus, mode, step)?;
    let state = decoder_step(tape, model, hyp.state, hyp.feedback, att.context)?;
    let logits = output_logits(tape, model, state)?;
    let log_probs = tape.with_value(logits, log_softmax);
    Ok(Expansion {
        state,
        focus: att.focus,
        record: att.record,
        log_probs,
    })
}

/// Beam search with per-hypothesis focus tracking.
///
/// Each step expands every active hypothesis and keeps the best
/// `beam - finished` candidates by accumulated log-probability (no length
/// normalization; ties go to the lower token id, then to the earlier beam
/// entry). Candidates ending in EOS move to the finished list.
pub fn beam_search(model: &Model, source: &[TokenId], config: &DecodeConfig) -> Result<DecodeTrace> {
    if source.is_empty() {
        return Err(Error::Empty("source sentence"));
    }
    if config.beam == 0 {
        return Err(Error::Config("beam must be >= 1".into()));
    }
    let max_out = config.max_out_for(source.len());
    if max_out == 0 {
        return Err(Error::Config("max_out must be >= 1".into()));
    }
    let start = Instant::now();
    let tape = model.tape();
    let enc = encode(&tape, model, source)?;
    let mode = Mode::Test { tau: config.tau };

    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: initial_state(&tape, model),
        focus: None,
        feedback: embed_bos(&tape, model)?,
        steps: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut step_windows = Vec::new();
    let mut score_evals = 0u64;

    for step in 1..=max_out {
        let expansions: Vec<Expansion> = active.iter().map(|h| expand(&tape, model, h, &enc, mode, step)).collect::<Result<_>>()?;
        let windows: Vec<Window> = expansions.iter().map(|e| e.record.window).collect();
        score_evals += windows.iter().map(|w| w.width() as u64).sum::<u64>();
        step_windows.push(windows);

        let keep = config.beam - finished.len();
        let mut cands: Vec<(f64, TokenId, usize)> = Vec::with_capacity(expansions.len() * model.config.tgt_vocab);
        for (b, (h, e)) in active.iter().zip(&expansions).enumerate() {
            cands.extend(e.log_probs.iter().enumerate().map(|(tok, lp)| (h.log_prob + lp, tok, b)));
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cands.truncate(keep);

        let mut next = Vec::with_capacity(keep);
        for (lp, tok, b) in cands {
            let parent = &active[b];
            let e = &expansions[b];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let mut steps = parent.steps.clone();
            steps.push(e.record.clone());
            let hyp = Hypothesis {
                tokens,
                log_prob: lp,
                state: e.state,
                focus: Some(e.focus),
                feedback: if tok == EOS { parent.feedback } else { embed_target(&tape, model, tok)? },
                steps,
            };
            if tok == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
    }

    // earliest finished wins ties
    let pick = |pool: &[Hypothesis]| -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, h) in pool.iter().enumerate() {
            if best.is_none_or(|b| h.log_prob > pool[b].log_prob) {
                best = Some(i);
            }
        }
        best
    };
    let (mut best, completed) = match pick(&finished) {
        Some(i) => (finished.swap_remove(i), true),
        None => {
            let i = pick(&active).expect("beam never empties without finishing");
            (active.swap_remove(i), false)
        }
    };
    if completed {
        best.tokens.pop();
    }
    Ok(DecodeTrace {
        tokens: best.tokens,
        log_prob: best.log_prob,
        completed,
        source_len: source.len(),
        steps: best.steps,
        step_windows,
        score_evals,
        score_calls: tape.score_calls(),
        duration: start.elapsed(),
    })
}

/// Greedy argmax decoding; ties go to the lower token id.
pub fn greedy(model: &Model, source: &[TokenId], tau: f64) -> Result<DecodeTrace> {
    beam_search(model, source, &DecodeConfig::greedy(tau))
}

/// Decodes with the reference tokens as feedback, so the step count is
/// `|reference|` for every attention kind. `reference` should include EOS.
/// `tokens` holds the per-step argmax predictions and `log_prob` the
/// reference log-likelihood.
pub fn forced_decode(model: &Model, source: &[TokenId], reference: &[TokenId], tau: f64) -> Result<DecodeTrace> {
    if source.is_empty() {
        return Err(Error::Empty("source sentence"));
    }
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    let start = Instant::now();
    let tape = model.tape();
    let enc = encode(&tape, model, source)?;
    let mode = Mode::Test { tau };
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: initial_state(&tape, model),
        focus: None,
        feedback: embed_bos(&tape, model)?,
        steps: Vec::new(),
    };
    let mut step_windows = Vec::with_capacity(reference.len());
    let mut score_evals = 0u64;
    for (t, &gold) in reference.iter().enumerate() {
        let e = expand(&tape, model, &hyp, &enc, mode, t + 1)?;
        if gold >= e.log_probs.len() {
            return Err(Error::TokenRange {
                id: gold,
                size: e.log_probs.len(),
            });
        }
        score_evals += e.record.window.width() as u64;
        step_windows.push(vec![e.record.window]);
        let argmax = e
            .log_probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &lp)| if lp > e.log_probs[best] { i } else { best });
        hyp.tokens.push(argmax);
        hyp.log_prob += e.log_probs[gold];
        hyp.state = e.state;
        hyp.focus = Some(e.focus);
        hyp.feedback = embed_target(&tape, model, gold)?;
        hyp.steps.push(e.record);
    }
    Ok(DecodeTrace {
        tokens: hyp.tokens,
        log_prob: hyp.log_prob,
        completed: reference.last() == Some(&EOS),
        source_len: source.len(),
        steps: hyp.steps,
        step_windows,
        score_evals,
        score_calls: tape.score_calls(),
        duration: start.elapsed(),
    })
}

/// Corpus-level decoding summary; sums are order-insensitive so shards can
/// be merged with [`CorpusMetrics::merge`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub hypotheses: Vec<Vec<TokenId>>,
    pub sentences: usize,
    /// Σ over sentences of each sentence's own avg_window.
    pub window_mean_sum: f64,
    pub window_sum: u64,
    pub hypothesis_steps: u64,
    pub score_evals: u64,
    pub score_calls: u64,
    pub strength_sum: f64,
    pub strength_steps: u64,
    pub source_len_sum: u64,
    pub duration: Duration,
}

impl CorpusMetrics {
    pub fn add(&mut self, trace: &DecodeTrace) {
        self.hypotheses.push(trace.tokens.clone());
        self.sentences += 1;
        self.window_mean_sum += trace.avg_window();
        self.window_sum += trace.score_evals;
        self.hypothesis_steps += trace.hypothesis_steps() as u64;
        self.score_evals += trace.score_evals;
        self.score_calls += trace.score_calls;
        for g in trace.steps.iter().filter_map(|s| s.strength) {
            self.strength_sum += g;
            self.strength_steps += 1;
        }
        self.source_len_sum += trace.source_len as u64;
        self.duration += trace.duration;
    }

    /// Appends `other`'s hypotheses after this shard's.
    pub fn merge(mut self, other: CorpusMetrics) -> Self {
        self.hypotheses.extend(other.hypotheses);
        self.sentences += other.sentences;
        self.window_mean_sum += other.window_mean_sum;
        self.window_sum += other.window_sum;
        self.hypothesis_steps += other.hypothesis_steps;
        self.score_evals += other.score_evals;
        self.score_calls += other.score_calls;
        self.strength_sum += other.strength_sum;
        self.strength_steps += other.strength_steps;
        self.source_len_sum += other.source_len_sum;
        self.duration += other.duration;
        self
    }

    /// Mean over sentences of the per-sentence average window. For Global
    /// attention this is the mean source length.
    pub fn avg_window(&self) -> f64 {
        if self.sentences == 0 {
            0.0
        } else {
            self.window_mean_sum / self.sentences as f64
        }
    }

    /// Window average weighted by each sentence's step·hypothesis count.
    pub fn avg_window_weighted(&self) -> f64 {
        if self.hypothesis_steps == 0 {
            0.0
        } else {
            self.window_sum as f64 / self.hypothesis_steps as f64
        }
    }

    pub fn mean_source_len(&self) -> f64 {
        if self.sentences == 0 {
            0.0
        } else {
            self.source_len_sum as f64 / self.sentences as f64
        }
    }

    pub fn mean_strength(&self) -> Option<f64> {
        (self.strength_steps > 0).then(|| self.strength_sum / self.strength_steps as f64)
    }
}

/// Decodes every pair, keeping each trace through `on_trace`.
pub fn corpus_metrics_with(
    model: &Model,
    pairs: &[CorpusPair],
    config: &DecodeConfig,
    mut on_trace: impl FnMut(usize, &DecodeTrace),
) -> Result<CorpusMetrics> {
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut m = CorpusMetrics::default();
    for (i, p) in pairs.iter().enumerate() {
        let trace = beam_search(model, &p.source, config)?;
        on_trace(i, &trace);
        m.add(&trace);
    }
    Ok(m)
}

pub fn corpus_metrics(model: &Model, pairs: &[CorpusPair], config: &DecodeConfig) -> Result<CorpusMetrics> {
    corpus_metrics_with(model, pairs, config, |_, _| {})
}

/// Exported per-sentence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tokens: Vec<TokenId>,
    pub avg_window: f64,
    pub score_evals: u64,
    pub duration_ms: f64,
    /// `[lo, hi, g]` per step of the returned hypothesis; `g` is null
    /// without a strength function.
    pub spans: Vec<(usize, usize, Option<f64>)>,
}

impl From<&DecodeTrace> for TraceRecord {
    fn from(t: &DecodeTrace) -> Self {
        TraceRecord {
            tokens: t.tokens.clone(),
            avg_window: t.avg_window(),
            score_evals: t.score_evals,
            duration_ms: t.duration.as_secs_f64() * 1e3,
            spans: t.steps.iter().map(|s| (s.window.lo, s.window.hi, s.strength)).collect(),
        }
    }
}
