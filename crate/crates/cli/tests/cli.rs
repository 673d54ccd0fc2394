use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
# small enough to train in a second
vocab_size=20
min_chunks=2
max_chunks=3
min_chunk_len=1
max_chunk_len=3
train_size=40
dev_size=8
test_size=8
embed_dim=4
hidden_dim=4
preout_dim=4
batch_size=8
lr=0.01
epochs=2
halve_from_epoch=5
";

fn flexattn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexattn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = flexattn(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], cwd: &Path) -> String {
    let out = flexattn(args, cwd);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic should be one line: {err}");
    err
}

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    ok(&["gen", "--config", "tiny.cfg", "--seed", "7", "--out", "data"], dir.path());
    dir
}

#[test]
fn gen_is_deterministic_and_reports_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let a = ok(&["gen", "--config", "tiny.cfg", "--task", "block_swap", "--seed", "7", "--out", "a"], d);
    let b = ok(&["gen", "--config", "tiny.cfg", "--task", "block_swap", "--seed", "7", "--out", "b"], d);
    assert_eq!(a, b);
    for f in ["train.tsv", "dev.tsv", "test.tsv", "src.vocab", "tgt.vocab", "config.txt"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    // recount the mean source length straight from the file
    let text = fs::read_to_string(d.join("a/train.tsv")).unwrap();
    let lens: Vec<usize> = text.lines().map(|l| l.split('\t').next().unwrap().split_whitespace().count()).collect();
    let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
    let line = a.lines().find(|l| l.starts_with("train:")).unwrap();
    assert!(line.contains(&format!("pairs={}", lens.len())));
    assert!(line.contains(&format!("mean_source_len={mean:.3}")), "{line}");
    let cfg = fs::read_to_string(d.join("a/config.txt")).unwrap();
    assert!(cfg.contains("seed=7") && cfg.contains("task=block_swap"));

    let c = ok(&["gen", "--config", "tiny.cfg", "--seed", "8", "--out", "c"], d);
    assert_ne!(fs::read(d.join("a/train.tsv")).unwrap(), fs::read(d.join("c/train.tsv")).unwrap());
    assert!(c.contains("train:"));
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let e = fails(&["gen", "--task", "sort", "--out", "x"], d);
    assert!(e.contains("unknown task 'sort'"), "{e}");
    fs::write(d.join("bad.cfg"), "lr=0.1\nwarmup=3\n").unwrap();
    let e = fails(&["gen", "--config", "bad.cfg"], d);
    assert!(e.contains("unknown config key 'warmup'") && e.contains("bad.cfg:2"), "{e}");
    fails(&["gen", "--tau", "zero"], d);
    fails(&["frobnicate"], d);
    fails(&["eval", "--checkpoint", "missing.ckpt"], d);
}

#[test]
fn flags_override_config_file() {
    let dir = setup();
    let d = dir.path();
    let out = ok(&["train", "--config", "tiny.cfg", "--data", "data", "--attention", "global", "--epochs", "1", "--out", "g"], d);
    let first: serde_json::Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert_eq!(first["config"]["epochs"], "1");
    assert_eq!(first["config"]["attention_kind"], "global");
    assert_eq!(first["config"]["lr"], "0.01");
    let ckpt = fs::read_to_string(d.join("g/model.ckpt")).unwrap();
    assert!(ckpt.contains("attention_kind=global"));
    assert!(ckpt.contains("run.epochs=1"));
    assert_eq!(out.lines().filter(|l| l.contains("\"phase\":\"train\"")).count(), 1);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = setup();
    let d = dir.path();
    ok(&["train", "--config", "tiny.cfg", "--data", "data", "--attention", "flexible", "--out", "full"], d);
    ok(&["train", "--config", "tiny.cfg", "--data", "data", "--attention", "flexible", "--epochs", "1", "--out", "part"], d);
    ok(&["train", "--config", "tiny.cfg", "--data", "data", "--attention", "flexible", "--out", "part", "--resume"], d);
    let epochs = |run: &str| -> Vec<String> {
        fs::read_to_string(d.join(run).join("train.log"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"phase\""))
            .map(str::to_owned)
            .collect()
    };
    assert_eq!(epochs("full").len(), 2);
    assert_eq!(epochs("full"), epochs("part"));
    assert_eq!(fs::read(d.join("full/model.ckpt")).unwrap(), fs::read(d.join("part/model.ckpt")).unwrap());
    assert_eq!(fs::read(d.join("full/adam.state")).unwrap(), fs::read(d.join("part/adam.state")).unwrap());
    fails(&["train", "--config", "tiny.cfg", "--data", "data", "--out", "empty", "--resume"], d);
}

#[test]
fn finetune_sweep_eval_visualize_bench() {
    let dir = setup();
    let d = dir.path();
    ok(&["train", "--config", "tiny.cfg", "--data", "data", "--out", "run"], d);

    let out = ok(&["finetune", "--checkpoint", "run/model.ckpt", "--data", "data", "--out", "ft.ckpt"], d);
    let summary: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(summary["beta"], 0.1);
    assert!(summary["mean_g_before"].is_f64() && summary["mean_g_after"].is_f64());
    assert!(d.join("ft.ckpt").exists());

    let out = ok(&["sweep", "--checkpoint", "ft.ckpt", "--data", "data", "--beam", "2", "--out", "sweep.jsonl"], d);
    let taus: Vec<&str> = out
        .lines()
        .filter(|l| l.starts_with("Flexible"))
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    assert_eq!(taus, ["0.3", "0.5", "0.8", "1", "1.2", "1.4", "1.6", "5", "8", "999", "inf"]);
    let sel = out.lines().find(|l| l.starts_with("selected tau=")).unwrap();
    assert!(sel.contains("reduction=") && sel.ends_with("% vs tau=inf"), "{sel}");
    let jsonl = fs::read_to_string(d.join("sweep.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 1 + 11 + 1);
    assert!(jsonl.lines().next().unwrap().contains("\"config\""));

    let out = ok(&["eval", "--checkpoint", "ft.ckpt", "--data", "data", "--traces", "traces.jsonl"], d);
    let report: serde_json::Value = serde_json::from_str(out.lines().nth(1).unwrap()).unwrap();
    assert!(report["tau"].is_null());
    assert_eq!(report["beam"], 5);
    for k in ["avg_window", "bleu", "seq_accuracy", "score_evals"] {
        assert!(!report[k].is_null(), "{k}");
    }
    assert_eq!(fs::read_to_string(d.join("traces.jsonl")).unwrap().lines().count(), 8);

    let sentence = fs::read_to_string(d.join("data/test.tsv")).unwrap().lines().next().unwrap().split('\t').next().unwrap().to_string();
    let s_len = sentence.split_whitespace().count();
    let out = ok(&["visualize", "--checkpoint", "ft.ckpt", "--data", "data", "--sentence", &sentence, "--tau", "0.5", "--svg", "one.svg"], d);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#') || l.starts_with("##") || l.starts_with("#.")).filter(|l| !l.starts_with("# ")).collect();
    assert!(!rows.is_empty());
    for r in &rows {
        let grid = r.split_whitespace().next().unwrap();
        assert_eq!(grid.len(), s_len);
        assert!(grid.chars().all(|c| c == '#' || c == '.'));
    }
    assert!(fs::read_to_string(d.join("one.svg")).unwrap().starts_with("<svg"));
    let out = ok(&["visualize", "--checkpoint", "ft.ckpt", "--data", "data", "--file", "data/dev.tsv", "--svg", "svgs"], d);
    assert_eq!(out.matches("# source:").count(), 8);
    assert_eq!(out.split("\n\n").count(), 8);
    assert!(d.join("svgs/span_8.svg").exists());

    let out = ok(&["visualize", "--checkpoint", "run/model.ckpt", "--data", "data", "--sentence", &sentence, "--tau", "0.3"], d);
    assert!(out.lines().any(|l| l.starts_with('#') && !l.starts_with("# ")));

    let out = ok(&["bench", "--checkpoint", "ft.ckpt", "--data", "data", "--tau", "1.2"], d);
    let b: serde_json::Value = serde_json::from_str(out.lines().nth(1).unwrap()).unwrap();
    assert!(b["score_evals_tau"].as_u64().unwrap() <= b["score_evals_inf"].as_u64().unwrap());
    assert!(b["score_evals_reduction_pct"].is_f64());
    fails(&["bench", "--checkpoint", "ft.ckpt", "--data", "data"], d);
}

#[test]
fn global_checkpoints_are_rejected_where_flexible_is_needed() {
    let dir = setup();
    let d = dir.path();
    ok(&["train", "--config", "tiny.cfg", "--data", "data", "--attention", "global", "--epochs", "1", "--out", "g"], d);
    let e = fails(&["finetune", "--checkpoint", "g/model.ckpt", "--data", "data"], d);
    assert!(e.contains("requires a flexible-attention model"), "{e}");
    fails(&["sweep", "--checkpoint", "g/model.ckpt", "--data", "data"], d);
    let e = fails(&["eval", "--checkpoint", "g/model.ckpt", "--data", "data", "--attention", "local"], d);
    assert!(e.contains("cannot be overridden"), "{e}");

    let sentence = fs::read_to_string(d.join("data/test.tsv")).unwrap().lines().next().unwrap().split('\t').next().unwrap().to_string();
    let out = ok(&["visualize", "--checkpoint", "g/model.ckpt", "--data", "data", "--sentence", &sentence], d);
    let grids: Vec<&str> = out.lines().filter(|l| !l.starts_with("# ")).collect();
    assert!(!grids.is_empty());
    for g in grids {
        let cells = g.split_whitespace().next().unwrap();
        assert!(cells.chars().all(|c| c == '#'), "{g}");
    }
}
