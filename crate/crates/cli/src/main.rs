mod commands;
mod config;
mod state;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "flexattn", version, about = "Flexible attention toy translation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Flags override the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// key=value settings file ('#' comments)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// copy | reverse | block_swap
    #[arg(long, global = true)]
    task: Option<String>,
    /// global | local | flexible
    #[arg(long, global = true)]
    attention: Option<String>,
    #[arg(long, global = true)]
    sigma: Option<String>,
    /// test-time threshold; "inf" disables thresholding
    #[arg(long, global = true)]
    tau: Option<String>,
    #[arg(long, global = true)]
    beta: Option<String>,
    #[arg(long, global = true)]
    beam: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<String>,
    #[arg(long, global = true)]
    long_mode: bool,
    /// output file or directory, depending on the command
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus split into train/dev/test
    Gen,
    /// Train a model
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// continue from the state saved in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune a flexible model with the strength regularizer
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Sweep test-time thresholds on the dev split and select one
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// comma-separated thresholds
        #[arg(long)]
        taus: Option<String>,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Decode a split and report BLEU, accuracy and window sizes
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// write one trace record per sentence
        #[arg(long, value_name = "FILE")]
        traces: Option<PathBuf>,
    },
    /// Render vision-span grids
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// space-separated source tokens
        #[arg(long, conflicts_with = "file")]
        sentence: Option<String>,
        /// corpus or plain sentence file, one sentence per line
        #[arg(long)]
        file: Option<PathBuf>,
        /// SVG output: a file for --sentence, a directory for --file
        #[arg(long, value_name = "PATH")]
        svg: Option<PathBuf>,
    },
    /// Time forced decoding at tau=inf against a finite tau
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k: &'static str, v: &Option<String>| {
            if let Some(v) = v {
                out.push((k, v.clone()));
            }
        };
        push("task", &self.task);
        push("attention", &self.attention);
        push("sigma", &self.sigma);
        push("tau", &self.tau);
        push("beta", &self.beta);
        push("beam", &self.beam);
        push("seed", &self.seed);
        push("epochs", &self.epochs);
        if self.long_mode {
            out.push(("long_mode", "true".into()));
        }
        out
    }

    /// Layers the config file and flags over `base`.
    pub fn resolve(&self, mut base: RunConfig) -> anyhow::Result<RunConfig> {
        if let Some(p) = &self.config {
            base.apply_file(p)?;
        }
        for (k, v) in self.overrides() {
            base.set(k, &v).map_err(|e| anyhow::anyhow!("--{}: {e:#}", k.replace('_', "-")))?;
        }
        base.validate()?;
        Ok(base)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Gen => commands::gen(c),
        Command::Train { data, resume } => commands::train(c, &data, resume),
        Command::Finetune { checkpoint, data } => commands::finetune(c, &checkpoint, &data),
        Command::Sweep { checkpoint, data, taus, split } => commands::sweep(c, &checkpoint, &data, taus.as_deref(), &split),
        Command::Eval { checkpoint, data, split, traces } => commands::eval(c, &checkpoint, &data, &split, traces.as_deref()),
        Command::Visualize { checkpoint, data, sentence, file, svg } => {
            commands::visualize(c, &checkpoint, &data, sentence.as_deref(), file.as_deref(), svg.as_deref())
        }
        Command::Bench { checkpoint, data, split } => commands::bench(c, &checkpoint, &data, &split),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { ExitCode::from(2) } else { ExitCode::SUCCESS };
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim();
            eprintln!("{first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
