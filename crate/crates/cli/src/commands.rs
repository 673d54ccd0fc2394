use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flexattn::data::{
    generate, load_corpus, mean_source_len, save_corpus, source_vocab, split_sizes, target_vocab, CorpusPair, Vocab,
};
use flexattn::decoding::{beam_search, forced_decode, DecodeConfig, TraceRecord};
use flexattn::evaluation::{evaluate_with, format_tau, render_spans, render_svg, select_threshold, sweep_thresholds};
use flexattn::model::{AttentionKind, Model, ModelConfig};
use flexattn::training::{finetune as run_finetune, Trainer};

use crate::config::RunConfig;
use crate::state::{checkpoint_bytes, read_checkpoint, write_atomic, RunDir, BEST};
use crate::Common;

const SRC_VOCAB: &str = "src.vocab";
const TGT_VOCAB: &str = "tgt.vocab";

struct Data {
    dir: PathBuf,
    src: Vocab,
    tgt: Vocab,
}

impl Data {
    fn open(dir: &Path) -> Result<Self> {
        let load = |name: &str| Vocab::load(&dir.join(name)).with_context(|| format!("loading {}", dir.join(name).display()));
        Ok(Data {
            dir: dir.to_path_buf(),
            src: load(SRC_VOCAB)?,
            tgt: load(TGT_VOCAB)?,
        })
    }

    fn split(&self, name: &str) -> Result<Vec<CorpusPair>> {
        let path = self.dir.join(format!("{name}.tsv"));
        let loaded = load_corpus(&path, &self.src, &self.tgt).with_context(|| format!("loading {}", path.display()))?;
        if loaded.pairs.is_empty() {
            bail!("{} is empty", path.display());
        }
        if loaded.unknown_tokens > 0 {
            eprintln!("warning: {} tokens in {} are not in the vocabulary", loaded.unknown_tokens, path.display());
        }
        Ok(loaded.pairs)
    }

    fn check_model(&self, model: &Model) -> Result<()> {
        if model.config.src_vocab != self.src.size() || model.config.tgt_vocab != self.tgt.size() {
            bail!(
                "checkpoint vocabularies ({}, {}) do not match {} ({}, {})",
                model.config.src_vocab,
                model.config.tgt_vocab,
                self.dir.display(),
                self.src.size(),
                self.tgt.size()
            );
        }
        Ok(())
    }
}

/// Emits each line to stdout and, when `--out` is given, to that file.
struct Output {
    lines: Vec<String>,
    file: Option<PathBuf>,
}

impl Output {
    fn new(file: Option<&Path>) -> Self {
        Output {
            lines: Vec::new(),
            file: file.map(Path::to_path_buf),
        }
    }

    fn line(&mut self, s: impl Into<String>) {
        let s = s.into();
        println!("{s}");
        self.lines.push(s);
    }

    fn finish(self) -> Result<()> {
        if let Some(path) = &self.file {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let mut text = self.lines.join("\n");
            text.push('\n');
            write_atomic(path, text.as_bytes())?;
        }
        Ok(())
    }
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string(v).expect("value serializes")
}

/// Defaults, then the checkpoint's recorded run settings, then file and flags.
fn resolve_with_checkpoint(common: &Common, checkpoint: &Path) -> Result<(RunConfig, Model)> {
    let (model, settings) = read_checkpoint(checkpoint)?;
    let mut base = RunConfig::default();
    base.apply_recorded(&settings)?;
    let cfg = common.resolve(base)?;
    if cfg.model.attention_kind != model.kind() || cfg.model.penalty_sigma != model.config.penalty_sigma {
        bail!(
            "checkpoint {} holds a {} model with sigma {}; attention and sigma cannot be overridden",
            checkpoint.display(),
            model.kind(),
            model.config.penalty_sigma
        );
    }
    Ok((cfg, model))
}

pub fn gen(common: &Common) -> Result<()> {
    let cfg = common.resolve(RunConfig::default())?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let spec = cfg.task_spec();
    let pairs = generate(&spec)?;
    let parts = split_sizes(&pairs, cfg.train_size, cfg.dev_size);
    let (src, tgt) = (source_vocab(spec.vocab_size), target_vocab(spec.vocab_size));
    src.save(&out.join(SRC_VOCAB))?;
    tgt.save(&out.join(TGT_VOCAB))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    for (name, part) in [("train", &parts.train), ("dev", &parts.dev), ("test", &parts.test)] {
        save_corpus(part, &src, &tgt, &out.join(format!("{name}.tsv")))?;
        let swapped = part.iter().filter(|p| !p.is_monotone()).count();
        println!(
            "{name}: pairs={} mean_source_len={:.3} swapped={}",
            part.len(),
            mean_source_len(part),
            swapped
        );
    }
    Ok(())
}

pub fn train(common: &Common, data: &Path, resume: bool) -> Result<()> {
    let cfg = common.resolve(RunConfig::default())?;
    let data = Data::open(data)?;
    let (train_pairs, dev) = (data.split("train")?, data.split("dev")?);
    let run = RunDir::new(&common.out.clone().unwrap_or_else(|| PathBuf::from("run")))?;
    let mut trainer = if resume && run.has_state() {
        let t = run.load(cfg.train_config())?;
        data.check_model(&t.model)?;
        if t.model.kind() != cfg.model.attention_kind {
            bail!("saved state is a {} model, config asks for {}", t.model.kind(), cfg.model.attention_kind);
        }
        t
    } else {
        if resume {
            bail!("nothing to resume in {}", run.dir.display());
        }
        let mc = ModelConfig {
            src_vocab: data.src.size(),
            tgt_vocab: data.tgt.size(),
            ..cfg.model.clone()
        };
        Trainer::new(Model::new(mc, cfg.seed)?, cfg.train_config())?
    };
    println!("{}", json(&cfg.to_json()));
    for l in &trainer.log {
        println!("{}", l.to_json());
    }
    let mut save_error = None;
    trainer.run(&train_pairs, &dev, |t| {
        println!("{}", t.log.last().expect("epoch logged").to_json());
        if let Err(e) = run.save(t, &cfg) {
            save_error = Some(e);
            return Err(flexattn::Error::Io(std::io::Error::other("saving training state failed")));
        }
        Ok(())
    })
    .or_else(|e| match save_error.take() {
        Some(se) => Err(se),
        None => Err(e.into()),
    })?;
    if trainer.log.is_empty() {
        bail!("no epochs ran");
    }
    let best = trainer.best.as_ref().expect("epochs ran");
    println!(
        "{}",
        json(&serde_json::json!({"selected_epoch": best.epoch, "dev_bleu": best.bleu, "dev_accuracy": best.accuracy, "checkpoint": run.path(BEST)}))
    );
    Ok(())
}

pub fn finetune(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let (cfg, model) = resolve_with_checkpoint(common, checkpoint)?;
    if model.kind() != AttentionKind::Flexible {
        return Err(flexattn::Error::UnsupportedMode("finetune").into());
    }
    let data = Data::open(data)?;
    data.check_model(&model)?;
    let (train_pairs, dev) = (data.split("train")?, data.split("dev")?);
    let tc = cfg.train_config();
    println!("{}", json(&cfg.to_json()));
    let outcome = run_finetune(model, &train_pairs, &dev, &tc)?;
    for l in &outcome.log {
        println!("{}", l.to_json());
    }
    let summary = serde_json::json!({
        "phase": "finetune",
        "beta": tc.beta,
        "lr": tc.final_lr(),
        "mean_g_before": outcome.mean_g_before,
        "mean_g_after": outcome.mean_g_after,
    });
    println!("{}", json(&summary));
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("finetuned.ckpt"));
    let mut recorded = cfg.recorded();
    recorded.push(("finetune.mean_g_before".into(), outcome.mean_g_before.to_string()));
    recorded.push(("finetune.mean_g_after".into(), outcome.mean_g_after.to_string()));
    write_atomic(&out, &checkpoint_bytes(&outcome.model, &recorded)?)?;
    Ok(())
}

pub fn sweep(common: &Common, checkpoint: &Path, data: &Path, taus: Option<&str>, split: &str) -> Result<()> {
    let (mut cfg, model) = resolve_with_checkpoint(common, checkpoint)?;
    if let Some(t) = taus {
        cfg.set("taus", t).context("--taus")?;
    }
    if model.kind() != AttentionKind::Flexible {
        return Err(flexattn::Error::UnsupportedMode("sweep").into());
    }
    let data = Data::open(data)?;
    data.check_model(&model)?;
    let pairs = data.split(split)?;
    let result = sweep_thresholds(&model, &pairs, &cfg.taus, cfg.beam)?;
    let sel = select_threshold(&result, cfg.max_bleu_loss)?;
    let mut out = Output::new(common.out.as_deref());
    for (k, v) in cfg.pairs() {
        println!("# {k}={v}");
    }
    print!("{}", result.table("Flexible"));
    if let Some(w) = &sel.warning {
        eprintln!("warning: {w}");
    }
    println!(
        "selected tau={} window={:.3} BLEU(%)={:.2} reduction={:.1}% vs tau=inf",
        format_tau(sel.tau),
        sel.report.avg_window,
        sel.report.bleu * 100.0,
        sel.window_reduction * 100.0
    );
    if out.file.is_some() {
        out.lines.push(json(&cfg.to_json()));
        out.lines.extend(result.rows.iter().map(json));
        out.lines.push(json(&serde_json::json!({
            "selected_tau": if sel.tau.is_finite() { serde_json::json!(sel.tau) } else { serde_json::Value::Null },
            "window_reduction": sel.window_reduction,
            "warning": sel.warning,
        })));
    }
    out.finish()
}

pub fn eval(common: &Common, checkpoint: &Path, data: &Path, split: &str, traces: Option<&Path>) -> Result<()> {
    let (cfg, model) = resolve_with_checkpoint(common, checkpoint)?;
    let data = Data::open(data)?;
    data.check_model(&model)?;
    let pairs = data.split(split)?;
    let mut records = Vec::new();
    let report = evaluate_with(&model, &pairs, &DecodeConfig::new(cfg.beam, cfg.tau), |_, t| {
        if traces.is_some() {
            records.push(json(&TraceRecord::from(t)));
        }
    })?;
    let mut out = Output::new(common.out.as_deref());
    out.line(json(&cfg.to_json()));
    out.line(json(&report));
    if let Some(path) = traces {
        let mut text = records.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
    }
    out.finish()
}

fn parse_sentence(line: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    let src = line.split('\t').next().unwrap_or("");
    let toks: Vec<usize> = src
        .split_whitespace()
        .map(|t| vocab.id(t).with_context(|| format!("unknown source token '{t}'")))
        .collect::<Result<_>>()?;
    if toks.is_empty() {
        bail!("empty sentence");
    }
    Ok(toks)
}

pub fn visualize(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    sentence: Option<&str>,
    file: Option<&Path>,
    svg: Option<&Path>,
) -> Result<()> {
    let (cfg, model) = resolve_with_checkpoint(common, checkpoint)?;
    let data = Data::open(data)?;
    data.check_model(&model)?;
    let sentences: Vec<Vec<usize>> = match (sentence, file) {
        (Some(s), None) => vec![parse_sentence(s, &data.src)?],
        (None, Some(f)) => {
            let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| parse_sentence(l, &data.src).with_context(|| format!("{}:{}", f.display(), i + 1)))
                .collect::<Result<_>>()?
        }
        _ => bail!("give exactly one of --sentence or --file"),
    };
    if let (Some(dir), Some(_)) = (svg, file) {
        fs::create_dir_all(dir)?;
    }
    let dc = DecodeConfig::new(cfg.beam, cfg.tau);
    let mut out = Output::new(common.out.as_deref());
    out.line(format!("# attention={} tau={} beam={}", model.kind(), format_tau(cfg.tau), cfg.beam));
    for (i, src) in sentences.iter().enumerate() {
        let trace = beam_search(&model, src, &dc)?;
        if i > 0 {
            out.line("");
        }
        let words: Vec<&str> = src.iter().map(|&t| data.src.token(t)).collect();
        out.line(format!("# source: {}", words.join(" ")));
        for row in render_spans(&trace, &data.tgt).lines() {
            out.line(row);
        }
        if let Some(p) = svg {
            let path = if file.is_some() { p.join(format!("span_{}.svg", i + 1)) } else { p.to_path_buf() };
            fs::write(&path, render_svg(&trace, &data.tgt)).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    out.finish()
}

pub fn bench(common: &Common, checkpoint: &Path, data: &Path, split: &str) -> Result<()> {
    let (cfg, model) = resolve_with_checkpoint(common, checkpoint)?;
    if cfg.tau.is_infinite() {
        bail!("bench compares tau=inf with a finite --tau");
    }
    let data = Data::open(data)?;
    data.check_model(&model)?;
    let pairs = data.split(split)?;
    let mut stats = [(0usize, 0u64, 0f64); 2];
    for p in &pairs {
        for (slot, tau) in [f64::INFINITY, cfg.tau].into_iter().enumerate() {
            let t = forced_decode(&model, &p.source, &p.target, tau)?;
            stats[slot].0 += t.steps.len();
            stats[slot].1 += t.score_evals;
            stats[slot].2 += t.duration.as_secs_f64() * 1e3;
        }
    }
    if stats[0].0 != stats[1].0 {
        bail!("forced decoding step counts differ ({} vs {})", stats[0].0, stats[1].0);
    }
    let n = pairs.len() as f64;
    let reduction = 1.0 - stats[1].1 as f64 / stats[0].1 as f64;
    let mut out = Output::new(common.out.as_deref());
    out.line(json(&cfg.to_json()));
    out.line(json(&serde_json::json!({
        "sentences": pairs.len(),
        "steps": stats[0].0,
        "tau": cfg.tau,
        "ms_per_sentence_inf": stats[0].2 / n,
        "ms_per_sentence_tau": stats[1].2 / n,
        "score_evals_inf": stats[0].1,
        "score_evals_tau": stats[1].1,
        "score_evals_reduction_pct": reduction * 100.0,
    })));
    out.finish()
}
