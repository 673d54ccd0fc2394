//! Resolved run settings: defaults, then a `key=value` file, then flags.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use flexattn::data::TaskSpec;
use flexattn::evaluation::{format_tau, DEFAULT_MAX_BLEU_LOSS, DEFAULT_TAUS};
use flexattn::model::{AttentionKind, ModelConfig};
use flexattn::training::TrainConfig;

/// Every setting a command may need. `seed` drives data generation, model
/// init and batch shuffling.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Vocabulary sizes are filled in from the corpus at model build time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: usize,
    pub tau: f64,
    pub taus: Vec<f64>,
    pub max_bleu_loss: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskSpec::default(),
            train_size: 10_000,
            dev_size: 500,
            test_size: 500,
            model: ModelConfig::new(1, 1, AttentionKind::Flexible),
            train: TrainConfig::default(),
            beam: 5,
            tau: f64::INFINITY,
            taus: DEFAULT_TAUS.to_vec(),
            max_bleu_loss: DEFAULT_MAX_BLEU_LOSS,
            seed: 1,
        }
    }
}

pub fn parse_tau(v: &str) -> Result<f64> {
    let t = match v {
        "inf" | "infinity" | "∞" => f64::INFINITY,
        _ => v.parse::<f64>().with_context(|| format!("bad threshold '{v}'"))?,
    };
    if !(t > 0.0) {
        bail!("threshold must be > 0, got {v}");
    }
    Ok(t)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow::anyhow!("bad value '{v}' for {key}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("bad value '{v}' for {key} (expected true or false)"),
    }
}

const MODEL_KEYS: [&str; 7] = [
    "embed_dim",
    "hidden_dim",
    "preout_dim",
    "attention_kind",
    "penalty_sigma",
    "local_half_window",
    "max_len",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.task;
        match key {
            "task" => t.kind = value.parse()?,
            "vocab_size" => t.vocab_size = num(key, value)?,
            "min_chunks" => t.min_chunks = num(key, value)?,
            "max_chunks" => t.max_chunks = num(key, value)?,
            "min_chunk_len" => t.min_chunk_len = num(key, value)?,
            "max_chunk_len" => t.max_chunk_len = num(key, value)?,
            "swap_prob" => t.swap_prob = num(key, value)?,
            "long_mode" => t.long_mode = parse_bool(key, value)?,
            "train_size" => self.train_size = num(key, value)?,
            "dev_size" => self.dev_size = num(key, value)?,
            "test_size" => self.test_size = num(key, value)?,
            "beam" => self.beam = num(key, value)?,
            "tau" => self.tau = parse_tau(value)?,
            "taus" => {
                self.taus = value.split(',').map(|s| parse_tau(s.trim())).collect::<Result<_>>()?;
                if self.taus.is_empty() {
                    bail!("taus must not be empty");
                }
            }
            "max_bleu_loss" => self.max_bleu_loss = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "attention" | "sigma" => self.model.set(key, value)?,
            k if MODEL_KEYS.contains(&k) => self.model.set(key, value)?,
            "src_vocab" | "tgt_vocab" => bail!("{key} is taken from the corpus vocabulary"),
            _ => self
                .train
                .set(key, value)
                .map_err(|_| anyhow::anyhow!("unknown config key '{key}'"))?,
        }
        Ok(())
    }

    /// Applies a config file: one `key=value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{origin}:{}: expected key=value", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `run.`-prefixed provenance settings stored in a checkpoint.
    pub fn apply_recorded(&mut self, settings: &[(String, String)]) -> Result<()> {
        for (k, v) in settings {
            if let Some(key) = k.strip_prefix("run.") {
                self.set(key, v).with_context(|| format!("checkpoint setting {k}"))?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        if self.beam == 0 {
            bail!("beam must be >= 1");
        }
        if !(self.max_bleu_loss >= 0.0) {
            bail!("max_bleu_loss must be >= 0");
        }
        Ok(())
    }

    /// Task spec sized for the whole corpus and seeded from the root seed.
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            size: self.train_size + self.dev_size + self.test_size,
            seed: self.seed,
            ..self.task.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let t = &self.task;
        let mut out: Vec<(String, String)> = vec![
            ("task".into(), t.kind.to_string()),
            ("vocab_size".into(), t.vocab_size.to_string()),
            ("min_chunks".into(), t.min_chunks.to_string()),
            ("max_chunks".into(), t.max_chunks.to_string()),
            ("min_chunk_len".into(), t.min_chunk_len.to_string()),
            ("max_chunk_len".into(), t.max_chunk_len.to_string()),
            ("swap_prob".into(), t.swap_prob.to_string()),
            ("long_mode".into(), t.long_mode.to_string()),
            ("train_size".into(), self.train_size.to_string()),
            ("dev_size".into(), self.dev_size.to_string()),
            ("test_size".into(), self.test_size.to_string()),
        ];
        for (k, v) in self.model.to_pairs() {
            if MODEL_KEYS.contains(&k) {
                out.push((k.into(), v));
            }
        }
        for (k, v) in self.train.to_pairs() {
            if k != "seed" {
                out.push((k.into(), v));
            }
        }
        let taus: Vec<String> = self.taus.iter().map(|t| format_tau(*t)).collect();
        out.extend([
            ("beam".into(), self.beam.to_string()),
            ("tau".into(), format_tau(self.tau)),
            ("taus".into(), taus.join(",")),
            ("max_bleu_loss".into(), self.max_bleu_loss.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]);
        out
    }

    /// Settings for a checkpoint header.
    pub fn recorded(&self) -> Vec<(String, String)> {
        self.pairs().into_iter().map(|(k, v)| (format!("run.{k}"), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> =
            self.pairs().into_iter().map(|(k, v)| (k, serde_json::Value::String(v))).collect();
        serde_json::json!({ "config": map })
    }
}
