use std::path::PathBuf;
use std::process::ExitCode;

use bind::artifacts::Checkpoint;
use bind::commands::{self, Query};
use bind::{BindError, Result};
use clap::{Parser, Subcommand};

/// Hub-and-spoke multimodal embedding experiments on synthetic worlds.
#[derive(Parser)]
#[command(name = "bind", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured pair and write a checkpoint and log.
    Train {
        /// Experiment config; the bundled desk config when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write JSON and CSV reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the evaluation plan from this config instead.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluation seed; defaults to the run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sweep ablation axes over a base config.
    Ablate {
        /// Suite file listing base config, seeds and axes.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the top-K items of one modality for a query item.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Modality to search.
        #[arg(long)]
        index: String,
        /// Query item as MODALITY:ITEM.
        #[arg(long, conflicts_with = "compose", required_unless_present = "compose")]
        query: Option<String>,
        /// Composed query, e.g. M1:3+M2:17.
        #[arg(long)]
        compose: Option<String>,
        /// Weight on the first compose term.
        #[arg(long, default_value_t = bind_core::evaluation::DEFAULT_ARITHMETIC_WEIGHT)]
        weight: f64,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Seed of the generated item set; defaults to the run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a world and write its parameters.
    Worldgen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = commands::resolve_config(config.as_deref(), seed)?;
            for f in commands::train(&cfg, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Eval { checkpoint, config, seed, out } => {
            let plan = config
                .as_deref()
                .map(|p| commands::resolve_config(Some(p), None))
                .transpose()?;
            let (_, files) = commands::eval(&checkpoint, plan.as_ref(), seed, &out)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Ablate { config, out } => {
            let (cells, files) = commands::ablate(&config, &out)?;
            let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
            eprintln!("{} cells, {failed} failed", cells.len());
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Retrieve { checkpoint, index, query, compose, weight, k, seed } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let query = match (query, compose) {
                (_, Some(c)) => {
                    let (first, second) = commands::parse_compose(&c)?;
                    Query::Compose { first, second, weight }
                }
                (Some(q), None) => Query::Item(q.parse()?),
                (None, None) => return Err(BindError::Config("--query or --compose is required".into())),
            };
            let seed = seed.unwrap_or(ckpt.config.seed);
            let hits = commands::retrieve(&ckpt, &index, &query, k, seed)?;
            print!("{}", commands::format_ranking(&hits));
        }
        Command::Worldgen { config, seed, out } => {
            let cfg = commands::resolve_config(config.as_deref(), seed)?;
            println!("{}", commands::worldgen(&cfg, &out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bind: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
