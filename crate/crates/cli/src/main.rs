use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use shapefsl::training::Algorithm;
use shapefsl_cli::config::DATA_ROOT_ENV;
use shapefsl_cli::*;

#[derive(Parser)]
#[command(name = "shapefsl", version, about = "Shape-aware few-shot learning: training, evaluation and robustness sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Caps worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root for folder sources.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Option<Algorithm>,
    /// Overrides the evaluation and robustness task counts.
    #[arg(long)]
    n_tasks: Option<usize>,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown algorithm `{s}` (lsfsl, distill, online, baseline)"))
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone (lsfsl, online, baseline; distill needs --teacher).
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Distill a frozen teacher checkpoint into a fresh student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Episodic evaluation of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Tint scenarios, Fourier and square-attack sweeps.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Backbone pretrained on tinted base data; trained on demand otherwise.
        #[arg(long)]
        pt_checkpoint: Option<PathBuf>,
    },
    /// The eight-row alignment-term ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic shape/texture dataset to disk.
    MakeToyData {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = &common.data_root {
        if cfg.data.root.is_none() {
            cfg.data.root = Some(r.clone());
        }
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
        cfg.train.lr_decay_epochs.retain(|&d| d < e);
    }
    if let Some(a) = common.algorithm {
        cfg.train.algorithm = a;
    }
    if let Some(n) = common.n_tasks {
        cfg.evaluation.n_tasks = n;
        cfg.robustness.n_tasks = n;
        cfg.ablation.n_tasks = n;
    }
    if let Some(w) = common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    cfg.resolve()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { common, teacher } => {
            let cfg = resolve(&common)?;
            cmd_pretrain(&cfg, &common.out, teacher.as_deref())?;
        }
        Command::Distill { common, teacher } => {
            let mut cfg = resolve(&common)?;
            cfg.train.algorithm = Algorithm::Distill;
            cmd_distill(&cfg, &common.out, &teacher)?;
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = resolve(&common)?;
            for r in cmd_evaluate(&cfg, &common.out, &checkpoint)? {
                println!("{}-way {}-shot: {:.2} ± {:.2}", r.n_way, r.k_shot, 100.0 * r.mean_acc, 100.0 * r.ci95());
            }
        }
        Command::Robustness { common, checkpoint, pt_checkpoint } => {
            let cfg = resolve(&common)?;
            cmd_robustness(&cfg, &common.out, &checkpoint, pt_checkpoint.as_deref())?;
        }
        Command::Ablate { common } => {
            let cfg = resolve(&common)?;
            for r in cmd_ablate(&cfg, &common.out)? {
                println!("{:<32} {:.2}", r.label, 100.0 * r.mean_acc);
            }
        }
        Command::MakeToyData { common } => {
            let cfg = resolve(&common)?;
            let root = cmd_make_toy_data(&cfg, &common.out)?;
            println!("{}", root.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
