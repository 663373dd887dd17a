use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mpdoc_core::pipeline::{self, EvalTask, RunConfig};
use mpdoc_core::{Precision, TaskSet};

mod settings;

#[derive(Parser, Debug)]
#[command(name = "mpdoc", version, about = "Multi-page multi-modal document representation learning")]
struct Cli {
    /// TOML file with run settings; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for this run. Must not exist or be empty.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    device: Option<String>,
    #[arg(long, global = true, value_parser = ["single", "double"])]
    precision: Option<String>,
    #[arg(long, global = true, value_parser = ["all", "text-only", "image-only"])]
    ablation: Option<String>,
    /// Comma-separated pre-training tasks, e.g. `mvlm,clf,dsp,dtm`.
    #[arg(long, global = true)]
    tasks: Option<String>,
    /// Override any config key, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (manifest plus page images).
    GenCorpus,
    /// Fit LDA on a corpus and write per-document topic vectors.
    MineTopics {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Multi-task pre-training.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// `doc_topics.jsonl` from `mine-topics`; needed when the dtm task is on.
        #[arg(long)]
        topics: Option<PathBuf>,
        /// Continue from the latest checkpoint of an earlier pretrain run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "classify", value_parser = ["classify", "tokens"])]
        task: String,
    },
    /// Score a checkpoint and write metrics.json.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "classify", value_parser = ["classify", "tokens", "retrieval"])]
        task: String,
    },
    /// Rank index documents for each query and write ranking.jsonl.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::MineTopics { .. } => "mine-topics",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Retrieve { .. } => "retrieve",
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut value = settings::defaults()?;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        settings::merge(&mut value, file);
    }
    for o in &cli.overrides {
        settings::set(&mut value, o)?;
    }
    let mut cfg: RunConfig = value.try_into().context("invalid configuration")?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.device {
        cfg.device = d.clone();
    }
    if let Some(p) = &cli.precision {
        cfg.precision = p.parse::<Precision>()?;
    }
    if let Some(a) = &cli.ablation {
        cfg.ablation = a.clone();
    }
    if let Some(t) = &cli.tasks {
        cfg.train.tasks = TaskSet::parse(t)?;
    }
    Ok(cfg.resolved()?)
}

/// `runs/<command>-<n>` with the first unused `n`.
fn default_run_dir(command: &str) -> PathBuf {
    (1..)
        .map(|n| Path::new("runs").join(format!("{command}-{n:03}")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.precision {
            Precision::Single => pipeline::$f::<f32>($($arg),*),
            Precision::Double => pipeline::$f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let dir = cli.run_dir.clone().unwrap_or_else(|| default_run_dir(cli.command.name()));
    pipeline::create_run_dir(&dir)?;
    pipeline::echo_config(&dir, &cfg)?;
    log::info!("{} → {}", cli.command.name(), dir.display());
    match &cli.command {
        Command::GenCorpus => {
            let manifest = pipeline::gen_corpus(&cfg, &dir)?;
            println!("{}", manifest.display());
        }
        Command::MineTopics { corpus } => {
            let out = pipeline::mine_topics(&cfg, corpus, &dir)?;
            println!("{}", out.display());
        }
        Command::Pretrain { corpus, topics, resume } => {
            let from = resume.as_deref().map(pipeline::latest_checkpoint).transpose()?;
            if cfg.train.tasks.dtm && topics.is_none() {
                bail!(
                    "the dtm task needs topic vectors: pass --topics <{}> from `mine-topics`, or drop dtm from --tasks",
                    pipeline::DOC_TOPICS_FILE
                );
            }
            let out = with_precision!(cfg, pretrain(&cfg, corpus, topics.as_deref(), &dir, from.as_deref()))?;
            println!("{}", out.display());
        }
        Command::Finetune { checkpoint, corpus, task } => {
            let task: EvalTask = task.parse()?;
            let out = with_precision!(cfg, finetune(&cfg, checkpoint, corpus, task, &dir))?;
            println!("{}", out.display());
        }
        Command::Evaluate { checkpoint, corpus, task } => {
            let task: EvalTask = task.parse()?;
            with_precision!(cfg, evaluate(&cfg, checkpoint, corpus, task, &dir))?;
            println!("{}", dir.join(pipeline::METRICS_FILE).display());
        }
        Command::Retrieve { checkpoint, corpus } => {
            let out = with_precision!(cfg, retrieve(&cfg, checkpoint, corpus, &dir))?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
