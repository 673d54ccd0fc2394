//! Global, Local (local-p) and Flexible attention, plus the closed-form
//! vision-span window used to skip score evaluations at test time.
//!
//! Positions are 0-based. A step's window `[lo, hi]` is inclusive and is
//! exactly the set of positions whose score is evaluated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionKind, EncoderStates, Model};
use crate::tensor::{Tape, Var};

/// Inclusive window of source positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub lo: usize,
    pub hi: usize,
}

impl Window {
    pub fn full(len: usize) -> Self {
        Window { lo: 0, hi: len - 1 }
    }

    pub fn width(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn contains(&self, s: usize) -> bool {
        (self.lo..=self.hi).contains(&s)
    }

    pub fn mask(&self, len: usize) -> Vec<bool> {
        (0..len).map(|s| self.contains(s)).collect()
    }
}

/// Penalty width σ and test-time threshold τ (`f64::INFINITY` disables skipping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub sigma: f64,
    pub tau: f64,
}

impl PenaltyConfig {
    pub fn new(sigma: f64, tau: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0 or inf, got {tau}")));
        }
        Ok(PenaltyConfig { sigma, tau })
    }
}

/// Whether windows may be narrowed. Training always attends over the full
/// sentence; at test time Flexible Attention skips positions whose penalty
/// reaches `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train,
    Test { tau: f64 },
}

impl Mode {
    pub fn tau(&self) -> f64 {
        match self {
            Mode::Train => f64::INFINITY,
            Mode::Test { tau } => *tau,
        }
    }
}

/// Per-decoding-step attention record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStep {
    /// 1-based decoding step.
    pub step: usize,
    /// `p_{t-1}`; `None` on the first step, which runs without a penalty.
    pub prev_focus: Option<f64>,
    /// `g(t)` (Flexible only).
    pub strength: Option<f64>,
    pub window: Window,
    /// Alignment weights over all source positions (zero outside `window`).
    pub weights: Vec<f64>,
    /// Tracked focus `Σ a_t(s)·s` (Global, Flexible) or predicted center (Local).
    pub focus: f64,
    pub score_evals: usize,
}

// ---------------------------------------------------------------------------
// Position arithmetic

/// `(s - p)² / 2σ²`.
pub fn distance(s: f64, p_prev: f64, sigma: f64) -> f64 {
    (s - p_prev).powi(2) / (2.0 * sigma * sigma)
}

/// Integer window of positions with `g · d(s, p_prev) < τ`.
///
/// The continuous solution is the open interval `p_prev ± σ√(2τ/g)`; its
/// integer points are `ceil(p - r) ..= floor(p + r)` with endpoints that land
/// exactly on `p ± r` excluded, clamped to `[0, S-1]`. When no integer
/// qualifies, the position nearest `p_prev` is used.
pub fn vision_span(p_prev: f64, g: f64, sigma: f64, tau: f64, len: usize) -> Window {
    let full = Window::full(len);
    if tau.is_infinite() || g <= 0.0 {
        return full;
    }
    let r = sigma * (2.0 * tau / g).sqrt();
    if !r.is_finite() {
        return full;
    }
    let last = (len - 1) as f64;
    let mut lo = (p_prev - r).ceil();
    let mut hi = (p_prev + r).floor();
    // settle the endpoints against the penalty itself so rounding in `r`
    // never disagrees with `penalty(s) < τ`
    let inside = |s: f64| g * distance(s, p_prev, sigma) < tau;
    if !inside(lo) {
        lo += 1.0;
    } else if inside(lo - 1.0) {
        lo -= 1.0;
    }
    if !inside(hi) {
        hi -= 1.0;
    } else if inside(hi + 1.0) {
        hi += 1.0;
    }
    let lo = lo.max(0.0);
    let hi = hi.min(last);
    if lo > hi {
        let s = p_prev.round().clamp(0.0, last) as usize;
        return Window { lo: s, hi: s };
    }
    Window {
        lo: lo as usize,
        hi: hi as usize,
    }
}

/// Local-p window `[p - D, p + D]` over integer positions, clamped to the sentence.
pub fn local_window(center: f64, half_window: usize, len: usize) -> Window {
    let last = (len - 1) as f64;
    let d = half_window as f64;
    let lo = (center - d).ceil().clamp(0.0, last);
    let hi = (center + d).floor().clamp(0.0, last);
    if lo > hi {
        let s = center.round().clamp(0.0, last) as usize;
        return Window { lo: s, hi: s };
    }
    Window {
        lo: lo as usize,
        hi: hi as usize,
    }
}

/// `Σ a(s)·s` over 0-based positions.
pub fn attention_center_of(weights: &[f64]) -> f64 {
    weights.iter().enumerate().map(|(s, a)| a * s as f64).sum()
}

fn positions(tape: &Tape<'_>, len: usize) -> Result<Var> {
    Ok(tape.constant_vec((0..len).map(|s| s as f64).collect())?)
}

// ---------------------------------------------------------------------------
// Differentiable pieces

/// `v_aᵀ tanh(W_a [h_{t-1}; h̄_s])` for a single encoder state, with
/// `W_a = [W_query | W_keyᵀ]`.
pub fn score(tape: &Tape<'_>, model: &Model, h_prev: Var, h_bar: Var) -> Result<Var> {
    let ids = model.params.ids();
    let q = tape.matvec(tape.param(ids.attn_query), h_prev)?;
    let k = tape.vecmat(h_bar, tape.param(ids.attn_key))?;
    let act = tape.tanh(tape.add(q, k)?)?;
    Ok(tape.dot(tape.param(ids.attn_v), act)?)
}

/// Scores for every position in `window` using the per-sentence key cache;
/// entries outside the window are zero and unevaluated.
pub fn window_scores(tape: &Tape<'_>, model: &Model, h_prev: Var, enc: &EncoderStates, window: Window) -> Result<Var> {
    let ids = model.params.ids();
    let q = tape.matvec(tape.param(ids.attn_query), h_prev)?;
    Ok(tape.window_scores(enc.keys, q, tape.param(ids.attn_v), window.lo, window.hi)?)
}

pub fn global_alignment(tape: &Tape<'_>, scores: Var) -> Result<Var> {
    Ok(tape.softmax(scores)?)
}

/// `c_t = Σ_s a_t(s) h̄_s`.
pub fn context_vector(tape: &Tape<'_>, weights: Var, enc: &EncoderStates) -> Result<Var> {
    Ok(tape.vecmat(weights, enc.states)?)
}

pub fn attention_center(tape: &Tape<'_>, weights: Var) -> Result<Var> {
    let n = tape.dims(weights)[0];
    Ok(tape.dot(weights, positions(tape, n)?)?)
}

/// `g(t) = sigmoid(v_gᵀ tanh(W_g [h_{t-1}; i_t]) + b_g)`.
pub fn penalty_strength(tape: &Tape<'_>, model: &Model, h_prev: Var, feedback: Var) -> Result<Var> {
    let ids = model.params.ids().strength.ok_or(Error::UnsupportedMode("penalty_strength"))?;
    let x = tape.concat(&[h_prev, feedback], 0)?;
    let act = tape.tanh(tape.matvec(tape.param(ids.w), x)?)?;
    let z = tape.add(tape.dot(tape.param(ids.v), act)?, tape.param(ids.b))?;
    Ok(tape.sigmoid(z)?)
}

/// `g · d(s, p_prev)` for every position.
pub fn penalties(tape: &Tape<'_>, g: Var, p_prev: Var, len: usize, sigma: f64) -> Result<Var> {
    let diff = tape.sub(positions(tape, len)?, tape.expand(p_prev, len)?)?;
    let d = tape.scale(tape.mul(diff, diff)?, 1.0 / (2.0 * sigma * sigma))?;
    Ok(tape.mul(tape.expand(g, len)?, d)?)
}

/// Softmax of `score - penalty` over the kept positions.
pub fn flexible_alignment(tape: &Tape<'_>, scores: Var, penalties: Var, mask: &[bool]) -> Result<Var> {
    let logits = tape.sub(scores, penalties)?;
    Ok(tape.softmax_masked(logits, mask)?)
}

/// `p_t = S · sigmoid(v_pᵀ tanh(W_p h))`.
pub fn local_p_center(tape: &Tape<'_>, model: &Model, h: Var, len: usize) -> Result<Var> {
    let ids = model.params.ids().local.ok_or(Error::Config("local_p_center requires a local-attention model".into()))?;
    let act = tape.tanh(tape.matvec(tape.param(ids.w), h)?)?;
    let z = tape.dot(tape.param(ids.v), act)?;
    Ok(tape.scale(tape.sigmoid(z)?, len as f64)?)
}

/// Softmax over the window, damped by `exp(-(s - p)² / 2(D/2)²)`; zero
/// outside `[p - D, p + D]` and deliberately not renormalized.
pub fn local_alignment(tape: &Tape<'_>, scores: Var, center: Var, half_window: usize, window: Window) -> Result<Var> {
    let len = tape.dims(scores)[0];
    let a = tape.softmax_masked(scores, &window.mask(len))?;
    let sigma = half_window as f64 / 2.0;
    let diff = tape.sub(positions(tape, len)?, tape.expand(center, len)?)?;
    let damp = tape.exp(tape.scale(tape.mul(diff, diff)?, -1.0 / (2.0 * sigma * sigma))?)?;
    Ok(tape.mul(a, damp)?)
}

// ---------------------------------------------------------------------------
// Full attention steps

/// Output of one attention step.
#[derive(Debug, Clone)]
pub struct Attended {
    pub context: Var,
    /// Focus to carry into the next step (Flexible tracks it).
    pub focus: Var,
    /// `g(t)` when the mechanism has one; enters the fine-tuning objective.
    pub strength: Option<Var>,
    pub record: AttentionStep,
}

fn record(tape: &Tape<'_>, step: usize, prev_focus: Option<Var>, strength: Option<Var>, window: Window, weights: Var, focus: Var) -> AttentionStep {
    AttentionStep {
        step,
        prev_focus: prev_focus.map(|p| tape.scalar(p)),
        strength: strength.map(|g| tape.scalar(g)),
        window,
        weights: tape.value(weights),
        focus: tape.scalar(focus),
        score_evals: window.width(),
    }
}

pub fn global_attend(tape: &Tape<'_>, model: &Model, h_prev: Var, enc: &EncoderStates, step: usize) -> Result<Attended> {
    let window = Window::full(enc.len);
    let scores = window_scores(tape, model, h_prev, enc, window)?;
    let weights = global_alignment(tape, scores)?;
    let focus = attention_center(tape, weights)?;
    Ok(Attended {
        context: context_vector(tape, weights, enc)?,
        focus,
        strength: None,
        record: record(tape, step, None, None, window, weights, focus),
    })
}

/// Flexible Attention step: strength, penalties around the previous focus,
/// the thresholded window (test mode only), windowed scores, penalized
/// softmax, new focus and context. `prev_focus` is `None` on the first step,
/// which attends over the whole sentence without a penalty.
pub fn flexible_attend(
    tape: &Tape<'_>,
    model: &Model,
    h_prev: Var,
    feedback: Var,
    enc: &EncoderStates,
    prev_focus: Option<Var>,
    mode: Mode,
    step: usize,
) -> Result<Attended> {
    let sigma = model.config.penalty_sigma;
    let len = enc.len;
    let g = penalty_strength(tape, model, h_prev, feedback)?;
    let (window, pen) = match prev_focus {
        None => (Window::full(len), None),
        Some(p) => {
            let window = match mode {
                Mode::Train => Window::full(len),
                Mode::Test { tau } => vision_span(tape.scalar(p), tape.scalar(g), sigma, tau, len),
            };
            (window, Some(penalties(tape, g, p, len, sigma)?))
        }
    };
    let scores = window_scores(tape, model, h_prev, enc, window)?;
    let mask = window.mask(len);
    let weights = match pen {
        Some(pen) => flexible_alignment(tape, scores, pen, &mask)?,
        None => tape.softmax_masked(scores, &mask)?,
    };
    let focus = attention_center(tape, weights)?;
    Ok(Attended {
        context: context_vector(tape, weights, enc)?,
        focus,
        strength: Some(g),
        record: record(tape, step, prev_focus, Some(g), window, weights, focus),
    })
}

/// Local-p step. The center is predicted from the attention query `h_{t-1}`.
pub fn local_attend(tape: &Tape<'_>, model: &Model, h_prev: Var, enc: &EncoderStates, step: usize) -> Result<Attended> {
    let center = local_p_center(tape, model, h_prev, enc.len)?;
    let window = local_window(tape.scalar(center), model.config.local_half_window, enc.len);
    let scores = window_scores(tape, model, h_prev, enc, window)?;
    let weights = local_alignment(tape, scores, center, model.config.local_half_window, window)?;
    Ok(Attended {
        context: context_vector(tape, weights, enc)?,
        focus: center,
        strength: None,
        record: record(tape, step, None, None, window, weights, center),
    })
}

/// Dispatches on the model's attention kind.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    tape: &Tape<'_>,
    model: &Model,
    h_prev: Var,
    feedback: Var,
    enc: &EncoderStates,
    prev_focus: Option<Var>,
    mode: Mode,
    step: usize,
) -> Result<Attended> {
    match model.kind() {
        AttentionKind::Global => global_attend(tape, model, h_prev, enc, step),
        AttentionKind::Local => local_attend(tape, model, h_prev, enc, step),
        AttentionKind::Flexible => flexible_attend(tape, model, h_prev, feedback, enc, prev_focus, mode, step),
    }
}
