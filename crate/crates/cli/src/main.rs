use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crlnet_cli::commands::{self, Split};
use crlnet_cli::config::{RunConfig, OUT_DIR_ENV};
use crlnet_cli::{CliError, Result};
use crlnet_core::synthetic::Pool;

#[derive(Parser)]
#[command(name = "crlnet", version, about = "Few-shot classification with conditional representation learning")]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; beats CRLNET_OUT_DIR and `out_dir` in the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Support,
    Query,
}

#[derive(Subcommand)]
enum Command {
    /// Generate both synthetic splits and write their manifests.
    GenData {
        /// Also write the image-folder layout.
        #[arg(long)]
        images: bool,
    },
    /// Train and write checkpoints plus the loss curve.
    Train,
    /// Episodic evaluation of a checkpoint.
    Eval {
        /// Defaults to `<out_dir>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Re-initialise everything but the backbone (baseline).
        #[arg(long)]
        untrained_head: bool,
    },
    /// Write representation vectors and pooled backbone features.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "query")]
        pool: PoolArg,
    },
    /// Render SVG plots from loss and accuracy CSVs.
    Plot {
        #[arg(long)]
        loss: Option<PathBuf>,
        #[arg(long)]
        accuracy: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set {kv:?} is not KEY=VALUE")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    } else if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        cfg.out_dir = dir.into();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let checkpoint = |p: &Option<PathBuf>| p.clone().unwrap_or_else(|| cfg.out_dir.join(commands::CHECKPOINT_FILE));
    match &cli.command {
        Command::GenData { images } => {
            commands::gen_data(&cfg, *images)?;
        }
        Command::Train => {
            let out = commands::train(&cfg)?;
            eprintln!("wrote {}", out.checkpoint.display());
        }
        Command::Eval { checkpoint: ck, untrained_head } => {
            commands::eval(&cfg, &checkpoint(ck), *untrained_head)?;
        }
        Command::ExportEmbeddings { checkpoint: ck, split, pool } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let pool = match pool {
                PoolArg::Support => Pool::Support,
                PoolArg::Query => Pool::Query,
            };
            let n = commands::export_embeddings(&cfg, &checkpoint(ck), split, pool)?;
            eprintln!("exported {n} samples");
        }
        Command::Plot { loss, accuracy } => {
            for p in commands::plot(&cfg.out_dir, loss.as_deref(), accuracy.as_deref())? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
