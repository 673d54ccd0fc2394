//! Smoothed BLEU, sequence accuracy, threshold sweeps and span rendering.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{CorpusPair, TokenId, Vocab, EOS};
use crate::decoding::{corpus_metrics_with, CorpusMetrics, DecodeConfig, DecodeTrace};
use crate::error::{Error, Result};
use crate::model::{AttentionKind, Model};

/// The threshold list searched by default; `∞` is appended as the reference row.
pub const DEFAULT_TAUS: [f64; 10] = [0.3, 0.5, 0.8, 1.0, 1.2, 1.4, 1.6, 5.0, 8.0, 999.0];

/// Allowed dev BLEU drop (0.5 BLEU points, on the [0,1] scale).
pub const DEFAULT_MAX_BLEU_LOSS: f64 = 0.005;

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

fn check_counts(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::Config(format!("{hyps} hypotheses for {refs} references")));
    }
    if hyps == 0 {
        return Err(Error::Empty("hypothesis set"));
    }
    Ok(())
}

/// Corpus BLEU with exact unigram precision and add-one smoothing for
/// orders 2..=max_n; brevity penalty `exp(min(0, 1 - r/c))`.
pub fn smoothed_bleu<H, R>(hyps: &[H], refs: &[R], max_n: usize) -> Result<f64>
where
    H: AsRef<[TokenId]>,
    R: AsRef<[TokenId]>,
{
    check_counts(hyps.len(), refs.len())?;
    if max_n == 0 {
        return Err(Error::Config("max_n must be >= 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (h.as_ref(), rf.as_ref());
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            matches[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if c == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 2..=max_n {
        log_sum += ((matches[n - 1] + 1) as f64 / (totals[n - 1] + 1) as f64).ln();
    }
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Fraction of exact matches.
pub fn sequence_accuracy<H, R>(hyps: &[H], refs: &[R]) -> Result<f64>
where
    H: AsRef<[TokenId]>,
    R: AsRef<[TokenId]>,
{
    check_counts(hyps.len(), refs.len())?;
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h.as_ref() == r.as_ref()).count();
    Ok(hits as f64 / hyps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Serialized as null for `τ = ∞`.
    #[serde(with = "tau_serde")]
    pub tau: f64,
    pub beam: usize,
    pub bleu: f64,
    pub seq_accuracy: f64,
    pub avg_window: f64,
    pub avg_window_weighted: f64,
    pub mean_source_len: f64,
    pub score_evals: u64,
    pub score_calls: u64,
    pub mean_g: Option<f64>,
    pub sentences: usize,
    pub duration_ms: f64,
}

mod tau_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(tau: &f64, s: S) -> Result<S::Ok, S::Error> {
        if tau.is_finite() {
            s.serialize_some(tau)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl EvalReport {
    /// Same report with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        EvalReport {
            duration_ms: 0.0,
            ..self.clone()
        }
    }
}

pub fn report_from(metrics: &CorpusMetrics, refs: &[&[TokenId]], config: &DecodeConfig) -> Result<EvalReport> {
    Ok(EvalReport {
        tau: config.tau,
        beam: config.beam,
        bleu: smoothed_bleu(&metrics.hypotheses, refs, 4)?,
        seq_accuracy: sequence_accuracy(&metrics.hypotheses, refs)?,
        avg_window: metrics.avg_window(),
        avg_window_weighted: metrics.avg_window_weighted(),
        mean_source_len: metrics.mean_source_len(),
        score_evals: metrics.score_evals,
        score_calls: metrics.score_calls,
        mean_g: metrics.mean_strength(),
        sentences: metrics.sentences,
        duration_ms: metrics.duration.as_secs_f64() * 1e3,
    })
}

/// Decodes `pairs` and scores the hypotheses against their targets.
pub fn evaluate(model: &Model, pairs: &[CorpusPair], config: &DecodeConfig) -> Result<EvalReport> {
    evaluate_with(model, pairs, config, |_, _| {})
}

pub fn evaluate_with(
    model: &Model,
    pairs: &[CorpusPair],
    config: &DecodeConfig,
    on_trace: impl FnMut(usize, &DecodeTrace),
) -> Result<EvalReport> {
    let metrics = corpus_metrics_with(model, pairs, config, on_trace)?;
    let refs: Vec<&[TokenId]> = pairs.iter().map(CorpusPair::target_tokens).collect();
    report_from(&metrics, &refs, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Strictly increasing in τ; the last row is `τ = ∞`.
    pub rows: Vec<EvalReport>,
}

impl SweepResult {
    pub fn reference(&self) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.tau.is_infinite())
    }

    pub fn row(&self, tau: f64) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.tau == tau)
    }

    pub fn without_timing(&self) -> Self {
        SweepResult {
            rows: self.rows.iter().map(EvalReport::without_timing).collect(),
        }
    }

    pub fn to_json_lines(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).expect("report serializes") + "\n").collect()
    }

    /// Aligned plain-text table: model, τ, window, BLEU(%), accuracy, score evals.
    pub fn table(&self, model: &str) -> String {
        let mut out = format!(
            "{:<10} {:>7} {:>9} {:>8} {:>8} {:>12}\n",
            "model", "tau", "window", "BLEU(%)", "acc(%)", "score_evals"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>9.3} {:>8.2} {:>8.2} {:>12}",
                model,
                format_tau(r.tau),
                r.avg_window,
                r.bleu * 100.0,
                r.seq_accuracy * 100.0,
                r.score_evals
            );
        }
        out
    }
}

pub fn format_tau(tau: f64) -> String {
    if tau.is_infinite() {
        "inf".to_string()
    } else {
        format!("{tau}")
    }
}

/// Evaluates the flexible model at every τ (sorted, deduplicated) plus `τ = ∞`.
pub fn sweep_thresholds(model: &Model, dev: &[CorpusPair], taus: &[f64], beam: usize) -> Result<SweepResult> {
    if model.kind() != AttentionKind::Flexible {
        return Err(Error::UnsupportedMode("sweep_thresholds"));
    }
    if taus.is_empty() {
        return Err(Error::Empty("threshold list"));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Config(format!("threshold must be > 0, got {t}")));
    }
    let mut list: Vec<f64> = taus.to_vec();
    list.push(f64::INFINITY);
    list.sort_by(f64::total_cmp);
    list.dedup();
    let rows = list
        .into_iter()
        .map(|tau| evaluate(model, dev, &DecodeConfig::new(beam, tau)))
        .collect::<Result<_>>()?;
    Ok(SweepResult { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub tau: f64,
    pub report: EvalReport,
    /// Set when no finite threshold stayed within the tolerance.
    pub warning: Option<String>,
    /// `1 - window(τ)/window(∞)`.
    pub window_reduction: f64,
}

/// Smallest-window τ whose dev BLEU is at least `reference - max_bleu_loss`;
/// ties on window go to the smaller τ.
pub fn select_threshold(sweep: &SweepResult, max_bleu_loss: f64) -> Result<Selection> {
    let reference = sweep.reference().ok_or(Error::Config("sweep lacks the tau=inf reference row".into()))?;
    let floor = reference.bleu - max_bleu_loss;
    let mut best = reference;
    for r in sweep.rows.iter().filter(|r| r.bleu >= floor) {
        if r.avg_window < best.avg_window || (r.avg_window == best.avg_window && r.tau < best.tau) {
            best = r;
        }
    }
    let warning = best
        .tau
        .is_infinite()
        .then(|| format!("no finite threshold keeps dev BLEU within {:.2} points; using tau=inf", max_bleu_loss * 100.0));
    let window_reduction = if reference.avg_window > 0.0 { 1.0 - best.avg_window / reference.avg_window } else { 0.0 };
    Ok(Selection {
        tau: best.tau,
        report: best.clone(),
        warning,
        window_reduction,
    })
}

/// Per-step window widths along the returned hypothesis.
pub fn span_widths(trace: &DecodeTrace) -> Vec<usize> {
    trace.steps.iter().map(|s| s.window.width()).collect()
}

fn emitted(trace: &DecodeTrace, step: usize) -> TokenId {
    trace.tokens.get(step).copied().unwrap_or(EOS)
}

/// One row per decoding step, one column per source position: `#` inside
/// the step's window, `.` outside, then `g(t)` and the emitted token.
pub fn render_spans(trace: &DecodeTrace, vocab: &Vocab) -> String {
    let mut out = String::new();
    for (r, step) in trace.steps.iter().enumerate() {
        let row: String = (0..trace.source_len).map(|s| if step.window.contains(s) { '#' } else { '.' }).collect();
        let g = step.strength.map_or_else(|| "   -".to_string(), |g| format!("{g:.2}"));
        let _ = writeln!(out, "{row}  {g} {}", vocab.token(emitted(trace, r)));
    }
    out
}

/// Vector-graphic version of [`render_spans`].
pub fn render_svg(trace: &DecodeTrace, vocab: &Vocab) -> String {
    const CELL: usize = 14;
    let cols = trace.source_len;
    let rows = trace.steps.len();
    let margin = 90;
    let (w, h) = (cols * CELL + margin, rows * CELL + 4);
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"11\">\n");
    for (r, step) in trace.steps.iter().enumerate() {
        for s in 0..cols {
            let fill = if step.window.contains(s) { "#333" } else { "#eee" };
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\"/>",
                s * CELL,
                r * CELL,
                CELL - 1,
                CELL - 1
            );
        }
        let g = step.strength.map_or_else(|| "-".to_string(), |g| format!("{g:.2}"));
        let label = vocab.token(emitted(trace, r)).replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(out, "<text x=\"{}\" y=\"{}\">{g} {label}</text>", cols * CELL + 6, r * CELL + 11);
    }
    out.push_str("</svg>\n");
    out
}
