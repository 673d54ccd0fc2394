//! Training state on disk, so `train --resume` continues bit-exactly.
//!
//! Layout of a run directory:
//! `model.ckpt` (best dev snapshot), `last.ckpt` (latest weights),
//! `adam.state` (optimizer moments) and `train.log` (one JSON record per line).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flexattn::model::{parse_checkpoint, parse_checkpoint_text, write_checkpoint, write_tensor_block, Model};
use flexattn::tensor::Tensor;
use flexattn::training::{AdamState, EpochLog, Selected, TrainConfig, Trainer};

use crate::config::RunConfig;

pub const BEST: &str = "model.ckpt";
pub const LAST: &str = "last.ckpt";
pub const ADAM: &str = "adam.state";
pub const LOG: &str = "train.log";

/// Writes through a temporary file so an interrupted save leaves the old copy.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn checkpoint_bytes(model: &Model, extra: &[(String, String)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(model, extra, &mut buf)?;
    Ok(buf)
}

pub fn read_checkpoint(path: &Path) -> Result<(Model, Vec<(String, String)>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    parse_checkpoint(&text).with_context(|| format!("checkpoint {}", path.display()))
}

fn setting<'a>(settings: &'a [(String, String)], key: &str) -> Option<&'a str> {
    settings.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn parsed<T: std::str::FromStr>(settings: &[(String, String)], key: &str, file: &Path) -> Result<T> {
    setting(settings, key)
        .and_then(|v| v.parse().ok())
        .with_context(|| format!("{}: missing or bad '{key}'", file.display()))
}

fn adam_bytes(names: &[String], adam: &AdamState) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    writeln!(buf, "step={}", adam.step)?;
    let mut all_names = Vec::new();
    let mut tensors = Vec::new();
    for (prefix, moments) in [("m", &adam.m), ("v", &adam.v)] {
        for (n, vals) in names.iter().zip(moments) {
            all_names.push(format!("{prefix}.{n}"));
            tensors.push(Tensor::vector(vals.clone())?);
        }
    }
    write_tensor_block(&mut buf, &all_names, &tensors)?;
    Ok(buf)
}

fn parse_adam(text: &str, names: &[String], path: &Path) -> Result<AdamState> {
    let parsed_text = parse_checkpoint_text(text)?;
    let step = parsed::<u64>(&parsed_text.settings, "step", path)?;
    if parsed_text.tensors.len() != 2 * names.len() {
        bail!("{}: expected {} moment tensors, found {}", path.display(), 2 * names.len(), parsed_text.tensors.len());
    }
    let (m, v) = parsed_text.tensors.split_at(names.len());
    let take = |part: &[(String, Tensor)], prefix: &str| -> Result<Vec<Vec<f64>>> {
        part.iter()
            .zip(names)
            .map(|((got, t), n)| {
                if *got != format!("{prefix}.{n}") {
                    bail!("{}: expected {prefix}.{n}, found {got}", path.display());
                }
                Ok(t.values().to_vec())
            })
            .collect()
    };
    Ok(AdamState {
        m: take(m, "m")?,
        v: take(v, "v")?,
        step,
    })
}

pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(RunDir { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn has_state(&self) -> bool {
        self.path(LAST).exists()
    }

    /// Saves everything needed to resume after the trainer's last epoch.
    pub fn save(&self, trainer: &Trainer, cfg: &RunConfig) -> Result<()> {
        let mut recorded = cfg.recorded();
        let best = trainer.best.as_ref().context("no epoch has completed")?;
        recorded.extend([
            ("trainer.best_epoch".to_string(), best.epoch.to_string()),
            ("trainer.best_bleu".to_string(), best.bleu.to_string()),
            ("trainer.best_accuracy".to_string(), best.accuracy.to_string()),
        ]);
        write_atomic(&self.path(BEST), &checkpoint_bytes(&best.model, &recorded)?)?;
        let mut last = recorded.clone();
        last.push(("trainer.epoch".to_string(), trainer.epoch.to_string()));
        write_atomic(&self.path(LAST), &checkpoint_bytes(&trainer.model, &last)?)?;
        write_atomic(&self.path(ADAM), &adam_bytes(trainer.model.params.names(), &trainer.adam)?)?;
        let mut log = serde_json::to_string(&cfg.to_json())? + "\n";
        for l in &trainer.log {
            log.push_str(&l.to_json());
            log.push('\n');
        }
        write_atomic(&self.path(LOG), log.as_bytes())?;
        Ok(())
    }

    pub fn load(&self, config: TrainConfig) -> Result<Trainer> {
        let last_path = self.path(LAST);
        let (model, settings) = read_checkpoint(&last_path)?;
        let epoch = parsed::<usize>(&settings, "trainer.epoch", &last_path)?;
        let best_path = self.path(BEST);
        let (best_model, best_settings) = read_checkpoint(&best_path)?;
        if best_model.config != model.config {
            bail!("{} and {} disagree on the model configuration", best_path.display(), last_path.display());
        }
        let best = Selected {
            model: best_model,
            epoch: parsed(&best_settings, "trainer.best_epoch", &best_path)?,
            bleu: parsed(&best_settings, "trainer.best_bleu", &best_path)?,
            accuracy: parsed(&best_settings, "trainer.best_accuracy", &best_path)?,
        };
        let adam_path = self.path(ADAM);
        let text = fs::read_to_string(&adam_path).with_context(|| format!("reading {}", adam_path.display()))?;
        let adam = parse_adam(&text, model.params.names(), &adam_path)?;
        let log_path = self.path(LOG);
        let log_text = fs::read_to_string(&log_path).with_context(|| format!("reading {}", log_path.display()))?;
        let log: Vec<EpochLog> = log_text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
        if log.len() != epoch {
            bail!("{} has {} epoch records, state is at epoch {epoch}", log_path.display(), log.len());
        }
        config.validate()?;
        Ok(Trainer {
            model,
            adam,
            config,
            epoch,
            best: Some(best),
            log,
        })
    }
}
