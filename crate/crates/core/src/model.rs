//! Encoder-decoder network: embeddings, bidirectional LSTM encoder, LSTM
//! decoder fed with `[i_t; c_t]`, tanh pre-output layer and vocabulary logits.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, BOS};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Global,
    Local,
    Flexible,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Global => "global",
            AttentionKind::Local => "local",
            AttentionKind::Flexible => "flexible",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(AttentionKind::Global),
            "local" => Ok(AttentionKind::Local),
            "flexible" => Ok(AttentionKind::Flexible),
            other => Err(Error::Config(format!(
                "unknown attention kind '{other}' (expected global, local or flexible)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub preout_dim: usize,
    pub attention_kind: AttentionKind,
    pub penalty_sigma: f64,
    pub local_half_window: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize, attention_kind: AttentionKind) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            embed_dim: 32,
            hidden_dim: 64,
            preout_dim: 48,
            attention_kind,
            penalty_sigma: 1.5,
            local_half_window: 3,
            max_len: 160,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.src_vocab,
            self.tgt_vocab,
            self.embed_dim,
            self.hidden_dim,
            self.preout_dim,
            self.max_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.local_half_window < 1 {
            return Err(Error::Config("local_half_window must be >= 1".into()));
        }
        if !(self.penalty_sigma > 0.0 && self.penalty_sigma.is_finite()) {
            return Err(Error::Config(format!("penalty_sigma must be > 0, got {}", self.penalty_sigma)));
        }
        Ok(())
    }

    /// Width of the score-function hidden layer (the rows of `W_a`).
    pub fn attention_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("src_vocab", self.src_vocab.to_string()),
            ("tgt_vocab", self.tgt_vocab.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("preout_dim", self.preout_dim.to_string()),
            ("attention_kind", self.attention_kind.to_string()),
            ("penalty_sigma", self.penalty_sigma.to_string()),
            ("local_half_window", self.local_half_window.to_string()),
            ("max_len", self.max_len.to_string()),
        ]
    }

    /// Applies one `key=value` setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "src_vocab" => self.src_vocab = num(key, value)?,
            "tgt_vocab" => self.tgt_vocab = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "preout_dim" => self.preout_dim = num(key, value)?,
            "attention_kind" | "attention" => self.attention_kind = value.parse()?,
            "penalty_sigma" | "sigma" => self.penalty_sigma = num(key, value)?,
            "local_half_window" => self.local_half_window = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }
}

/// Named parameter shapes for a configuration, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (e, h, p, a) = (cfg.embed_dim, cfg.hidden_dim, cfg.preout_dim, cfg.attention_dim());
    let mut out: Vec<(&str, Vec<usize>)> = vec![
        ("src_embed", vec![cfg.src_vocab, e]),
        ("tgt_embed", vec![cfg.tgt_vocab, e]),
        ("enc_fwd.w", vec![4 * h, e + h]),
        ("enc_fwd.b", vec![4 * h]),
        ("enc_bwd.w", vec![4 * h, e + h]),
        ("enc_bwd.b", vec![4 * h]),
        ("dec.w", vec![4 * h, e + 2 * h + h]),
        ("dec.b", vec![4 * h]),
        ("attn.w_query", vec![a, h]),
        ("attn.w_key", vec![2 * h, a]),
        ("attn.v", vec![a]),
    ];
    match cfg.attention_kind {
        AttentionKind::Flexible => {
            out.push(("strength.w", vec![a, h + e]));
            out.push(("strength.v", vec![a]));
            out.push(("strength.b", vec![1]));
        }
        AttentionKind::Local => {
            out.push(("local.w", vec![a, h]));
            out.push(("local.v", vec![a]));
        }
        AttentionKind::Global => {}
    }
    out.extend([
        ("preout.w", vec![p, h]),
        ("preout.b", vec![p]),
        ("out.w", vec![cfg.tgt_vocab, p]),
        ("out.b", vec![cfg.tgt_vocab]),
    ]);
    out.into_iter().map(|(n, d)| (n.to_string(), d)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrengthIds {
    pub w: usize,
    pub v: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalIds {
    pub w: usize,
    pub v: usize,
}

/// Indices into [`ModelParams::tensors`] for each named parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamIds {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub enc_fwd: LstmIds,
    pub enc_bwd: LstmIds,
    pub dec: LstmIds,
    pub attn_query: usize,
    pub attn_key: usize,
    pub attn_v: usize,
    pub strength: Option<StrengthIds>,
    pub local: Option<LocalIds>,
    pub preout_w: usize,
    pub preout_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

impl ParamIds {
    fn resolve(names: &[String]) -> Result<Self> {
        let find = |n: &str| {
            names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::Integrity(format!("missing parameter '{n}'")))
        };
        let lstm = |p: &str| -> Result<LstmIds> {
            Ok(LstmIds {
                w: find(&format!("{p}.w"))?,
                b: find(&format!("{p}.b"))?,
            })
        };
        let has = |n: &str| names.iter().any(|x| x == n);
        Ok(ParamIds {
            src_embed: find("src_embed")?,
            tgt_embed: find("tgt_embed")?,
            enc_fwd: lstm("enc_fwd")?,
            enc_bwd: lstm("enc_bwd")?,
            dec: lstm("dec")?,
            attn_query: find("attn.w_query")?,
            attn_key: find("attn.w_key")?,
            attn_v: find("attn.v")?,
            strength: if has("strength.w") {
                Some(StrengthIds {
                    w: find("strength.w")?,
                    v: find("strength.v")?,
                    b: find("strength.b")?,
                })
            } else {
                None
            },
            local: if has("local.w") {
                Some(LocalIds {
                    w: find("local.w")?,
                    v: find("local.v")?,
                })
            } else {
                None
            },
            preout_w: find("preout.w")?,
            preout_b: find("preout.b")?,
            out_w: find("out.w")?,
            out_b: find("out.b")?,
        })
    }
}

/// All trainable arrays, addressed by name or by [`ParamIds`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    ids: ParamIds,
}

impl ModelParams {
    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let (names, tensors): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Integrity(format!("duplicate parameter '{n}'")));
            }
        }
        let ids = ParamIds::resolve(&names)?;
        Ok(ModelParams { names, tensors, ids })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Uniform `[-0.08, 0.08]` weights, zero biases, forget-gate biases at 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let named = param_layout(&config)
            .into_iter()
            .map(|(name, dims)| {
                let mut t = Tensor::zeros(&dims);
                if name.ends_with(".b") {
                    if name.starts_with("enc_") || name.starts_with("dec") {
                        t.values_mut()[h..2 * h].fill(FORGET_BIAS);
                    }
                } else {
                    for v in t.values_mut() {
                        *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
                    }
                }
                (name, t)
            })
            .collect();
        Ok(Model {
            config,
            params: ModelParams::from_named(named)?,
        })
    }

    /// Every parameter zero, including forget biases.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let named = param_layout(&config)
            .into_iter()
            .map(|(n, d)| (n, Tensor::zeros(&d)))
            .collect();
        Ok(Model {
            config,
            params: ModelParams::from_named(named)?,
        })
    }

    pub fn kind(&self) -> AttentionKind {
        self.config.attention_kind
    }

    /// A fresh tape whose parameter leaves read this model's tensors.
    pub fn tape(&self) -> Tape<'_> {
        Tape::with_params(self.params.tensors())
    }
}

/// Encoder output for one sentence.
#[derive(Debug, Clone, Copy)]
pub struct EncoderStates {
    /// `[S × 2H]`; row `s` is `[forward_s; backward_s]`.
    pub states: Var,
    /// `[S × A]` encoder-side half of the score function, `h̄_s · W_key`,
    /// computed once per sentence.
    pub keys: Var,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub hidden: Var,
    pub cell: Var,
}

fn lstm_step(tape: &Tape<'_>, ids: LstmIds, input: Var, state: DecoderState, hidden: usize) -> Result<DecoderState> {
    let x = tape.concat(&[input, state.hidden], 0)?;
    let z = tape.add(tape.matvec(tape.param(ids.w), x)?, tape.param(ids.b))?;
    let hc = tape.lstm_gates(z, state.cell)?;
    Ok(DecoderState {
        hidden: tape.slice(hc, 0, hidden)?,
        cell: tape.slice(hc, hidden, hidden)?,
    })
}

fn zero_state(tape: &Tape<'_>, hidden: usize) -> DecoderState {
    let z = tape.constant(Tensor::zeros(&[hidden]));
    DecoderState { hidden: z, cell: z }
}

pub fn check_tokens(tokens: &[TokenId], vocab: usize, max_len: usize) -> Result<()> {
    if tokens.is_empty() || tokens.len() > max_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: max_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenRange { id, size: vocab });
    }
    Ok(())
}

/// Runs both encoder LSTMs from zero states and stacks `[fwd_s; bwd_s]` rows.
pub fn encode(tape: &Tape<'_>, model: &Model, tokens: &[TokenId]) -> Result<EncoderStates> {
    let cfg = &model.config;
    check_tokens(tokens, cfg.src_vocab, cfg.max_len)?;
    let ids = model.params.ids();
    let h = cfg.hidden_dim;
    let emb = tape.param(ids.src_embed);
    let inputs: Vec<Var> = tokens.iter().map(|&t| tape.row(emb, t)).collect::<std::result::Result<_, _>>()?;

    let mut fwd = Vec::with_capacity(tokens.len());
    let mut state = zero_state(tape, h);
    for &x in &inputs {
        state = lstm_step(tape, ids.enc_fwd, x, state, h)?;
        fwd.push(state.hidden);
    }
    let mut bwd = vec![fwd[0]; tokens.len()];
    let mut state = zero_state(tape, h);
    for (s, &x) in inputs.iter().enumerate().rev() {
        state = lstm_step(tape, ids.enc_bwd, x, state, h)?;
        bwd[s] = state.hidden;
    }
    let rows: Vec<Var> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(&[f, b], 0))
        .collect::<std::result::Result<_, _>>()?;
    let states = tape.stack_rows(&rows)?;
    let keys = tape.matmul(states, tape.param(ids.attn_key))?;
    Ok(EncoderStates {
        states,
        keys,
        len: tokens.len(),
    })
}

pub fn initial_state(tape: &Tape<'_>, model: &Model) -> DecoderState {
    zero_state(tape, model.config.hidden_dim)
}

/// Target-side embedding `i_t` of a feedback token.
pub fn embed_target(tape: &Tape<'_>, model: &Model, token: TokenId) -> Result<Var> {
    if token >= model.config.tgt_vocab {
        return Err(Error::TokenRange {
            id: token,
            size: model.config.tgt_vocab,
        });
    }
    Ok(tape.row(tape.param(model.params.ids().tgt_embed), token)?)
}

pub fn embed_bos(tape: &Tape<'_>, model: &Model) -> Result<Var> {
    embed_target(tape, model, BOS)
}

/// One decoder LSTM transition on `[i_t; c_t]`.
pub fn decoder_step(tape: &Tape<'_>, model: &Model, prev: DecoderState, feedback: Var, context: Var) -> Result<DecoderState> {
    let h = model.config.hidden_dim;
    let want = 2 * h;
    let got = tape.dims(context);
    if got != [want] {
        return Err(crate::tensor::TensorError::Shape {
            op: "decoder_step",
            left: got,
            right: vec![want],
        }
        .into());
    }
    let input = tape.concat(&[feedback, context], 0)?;
    lstm_step(tape, model.params.ids().dec, input, prev, h)
}

/// `W_out · tanh(W_pre h_t + b_pre) + b_out`.
pub fn output_logits(tape: &Tape<'_>, model: &Model, state: DecoderState) -> Result<Var> {
    let ids = model.params.ids();
    let pre = tape.tanh(tape.add(tape.matvec(tape.param(ids.preout_w), state.hidden)?, tape.param(ids.preout_b))?)?;
    Ok(tape.add(tape.matvec(tape.param(ids.out_w), pre)?, tape.param(ids.out_b))?)
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Writes `name rank dims.. count` header lines, a `values` marker, then one
/// value per line in header order. `f64` Display output round-trips exactly.
pub fn write_tensor_block(w: &mut impl Write, names: &[String], tensors: &[Tensor]) -> std::io::Result<()> {
    for (n, t) in names.iter().zip(tensors) {
        let dims: Vec<String> = t.dims().iter().map(usize::to_string).collect();
        writeln!(w, "param {} {} {} {}", n, t.rank(), dims.join(" "), t.len())?;
    }
    writeln!(w, "values")?;
    for t in tensors {
        for v in t.values() {
            writeln!(w, "{v:?}")?;
        }
    }
    Ok(())
}

/// Parsed checkpoint text: leading `key=value` lines and the tensor block.
pub struct CheckpointText {
    pub settings: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn parse_checkpoint_text(text: &str) -> Result<CheckpointText> {
    let mut settings = Vec::new();
    let mut headers: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse { line: line + 1, message };

    let mut saw_values = false;
    for (i, line) in lines.by_ref() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "values" {
            saw_values = true;
            break;
        }
        if let Some(rest) = line.strip_prefix("param ") {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            let bad = || parse_err(i, format!("malformed parameter header '{line}'"));
            let name = fields.first().ok_or_else(bad)?.to_string();
            let rank: usize = fields.get(1).and_then(|r| r.parse().ok()).ok_or_else(bad)?;
            if fields.len() != 3 + rank {
                return Err(bad());
            }
            let dims: Vec<usize> = fields[2..2 + rank].iter().map(|d| d.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            let count: usize = fields[2 + rank].parse().map_err(|_| bad())?;
            if dims.iter().product::<usize>() != count {
                return Err(Error::Integrity(format!("parameter '{name}': dims {dims:?} disagree with count {count}")));
            }
            headers.push((name, dims, count, i));
        } else if let Some((k, v)) = line.split_once('=') {
            if !headers.is_empty() {
                return Err(parse_err(i, "setting after parameter headers".into()));
            }
            settings.push((k.trim().to_string(), v.trim().to_string()));
        } else {
            return Err(parse_err(i, format!("unrecognized line '{line}'")));
        }
    }
    if !saw_values {
        return Err(Error::Integrity("missing 'values' section".into()));
    }

    let expected: usize = headers.iter().map(|h| h.2).sum();
    let mut values = Vec::with_capacity(expected);
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| parse_err(i, format!("bad number '{line}'")))?;
        values.push(v);
    }
    if values.len() != expected {
        return Err(Error::Integrity(format!("expected {expected} values, found {}", values.len())));
    }
    let mut tensors = Vec::with_capacity(headers.len());
    let mut off = 0;
    for (name, dims, count, _) in headers {
        let t = Tensor::new(dims, values[off..off + count].to_vec()).map_err(|e| Error::Integrity(format!("{name}: {e}")))?;
        off += count;
        tensors.push((name, t));
    }
    Ok(CheckpointText { settings, tensors })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(model, &[], &mut w)?;
    w.flush()?;
    Ok(())
}

/// Serializes `model`, with extra provenance settings placed after the model
/// configuration lines.
pub fn write_checkpoint(model: &Model, extra: &[(String, String)], w: &mut impl Write) -> Result<()> {
    for (k, v) in model.config.to_pairs() {
        writeln!(w, "{k}={v}")?;
    }
    for (k, v) in extra {
        writeln!(w, "{k}={v}")?;
    }
    write_tensor_block(w, model.params.names(), model.params.tensors())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Ok(parse_checkpoint(&fs::read_to_string(path)?)?.0)
}

/// Returns the model and any settings that are not model configuration.
pub fn parse_checkpoint(text: &str) -> Result<(Model, Vec<(String, String)>)> {
    let parsed = parse_checkpoint_text(text)?;
    let mut config = ModelConfig::new(1, 1, AttentionKind::Global);
    let mut extra = Vec::new();
    let known: Vec<&str> = config.to_pairs().iter().map(|(k, _)| *k).collect();
    for (k, v) in &parsed.settings {
        if known.contains(&k.as_str()) {
            config.set(k, v)?;
        } else {
            extra.push((k.clone(), v.clone()));
        }
    }
    config.validate()?;
    let layout = param_layout(&config);
    if layout.len() != parsed.tensors.len() {
        return Err(Error::Integrity(format!(
            "config implies {} parameters, file has {}",
            layout.len(),
            parsed.tensors.len()
        )));
    }
    for ((name, dims), (got_name, t)) in layout.iter().zip(&parsed.tensors) {
        if name != got_name || dims.as_slice() != t.dims() {
            return Err(Error::Integrity(format!(
                "expected {name} {dims:?}, found {got_name} {:?}",
                t.dims()
            )));
        }
    }
    Ok((
        Model {
            config,
            params: ModelParams::from_named(parsed.tensors)?,
        },
        extra,
    ))
}
