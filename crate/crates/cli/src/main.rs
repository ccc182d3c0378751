use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use promodet::harness::runner::{render_map, run_ablate, run_eval, run_stats, run_train};
use promodet::harness::TrainConfig;

#[derive(Parser)]
#[command(name = "promodet", version, about = "Single-shot detector with anchor promotion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
        /// Overrides `out.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Report COCO mAP of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Anchor census before and after promotion.
    Stats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every cell of the ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> anyhow::Result<TrainConfig> {
    TrainConfig::load(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            deterministic,
            out,
            overrides,
        } => {
            let mut cfg = load_config(&config)?;
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if deterministic {
                cfg.deterministic = true;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            cfg.validate()?;
            run_train(&cfg, &out)?;
            log::info!("wrote {}", out.display());
        }
        Command::Eval { checkpoint, dataset, out } => {
            let table = run_eval(&checkpoint, &dataset, out.as_deref())?;
            println!("{}", render_map(&table));
        }
        Command::Stats { checkpoint, dataset, out } => {
            let r = run_stats(&checkpoint, &dataset, &out)?;
            println!(
                "images {}  positives {} -> {}  negatives {} -> {}  clamped {}",
                r.images,
                r.before.positive_count,
                r.after.positive_count,
                r.before.negative_count,
                r.after.negative_count,
                r.clamped
            );
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            for row in run_ablate(&cfg, &out)? {
                println!("{row:?}");
            }
        }
    }
    Ok(())
}
