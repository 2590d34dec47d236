//! `capsid`: synthetic data, tokenizer training, SemanticBPE, decoding,
//! diagnostics and theory checks, chained through files.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use capsid::config::RunConfig;
use clap::{Parser, Subcommand, ValueEnum};

use crate::error::CliError;

const THREADS_ENV: &str = "CAPSID_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "capsid",
    version,
    about = "Capsule-routing semantic-ID tokenizer"
)]
struct Cli {
    /// Starting hyperparameters before the config file and overrides apply.
    #[arg(long, value_enum, default_value_t = Preset::Desk, global = true)]
    preset: Preset,

    /// `key=value` config file layered over the preset.
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,

    /// Single `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Directory that relative artifact paths resolve against.
    #[arg(long, value_name = "DIR", global = true)]
    work_dir: Option<PathBuf>,

    /// Worker threads; defaults to the available cores. CAPSID_THREADS wins
    /// over this flag. Results do not depend on the value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Capsule layers sized for the 8-cluster synthetic catalog.
    Desk,
    /// Full-size reference hyperparameters.
    Reference,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic embedding table and interaction log.
    Synth {
        /// Catalog seed; overrides the `seed` key.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a tokenizer on the embedding table and write a checkpoint.
    Train,
    /// Assign a semantic ID to every item.
    Tokenize,
    /// Fit a SemanticBPE vocabulary over the item SIDs.
    Bpe,
    /// Fit the next-token model and decode held-out users.
    Decode {
        /// Decode base tokens instead of merged subwords.
        #[arg(long)]
        no_vocab: bool,
    },
    /// Write the tokenizer diagnostics report.
    Diagnose,
    /// Evaluate the reconstruction and length bounds on the catalog.
    CheckTheory,
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match cli.preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Reference => RunConfig::default(),
    };
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::at(path)(e.into()))?;
        cfg.apply_text(&text).map_err(CliError::at(path))?;
    }
    for kv in &cli.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| capsid::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(dir) = &cli.work_dir {
        cfg.work_dir = dir.clone();
    }
    if let Command::Synth { seed: Some(seed) } = cli.command {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Threads(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) if flag == Some(0) => Err(CliError::Threads("--threads must be positive".into())),
        Err(_) => Ok(flag),
    }
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = build_config(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.threads)? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Threads(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Synth { .. } => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Tokenize => commands::tokenize(&cfg),
        Command::Bpe => commands::bpe(&cfg),
        Command::Decode { no_vocab } => commands::decode(&cfg, !no_vocab),
        Command::Diagnose => commands::diagnose(&cfg),
        Command::CheckTheory => commands::check_theory(&cfg),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let category = e.category();
            eprintln!("error[{}]: {e}", category.label());
            ExitCode::from(category.exit_code())
        }
    }
}
