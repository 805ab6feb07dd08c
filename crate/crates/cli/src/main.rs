//! `strataclip` command-line front end.
//!
//! Every experiment is reproducible from its flags: there is no hidden
//! entropy, and output row order follows the configuration, never the order
//! in which parallel work finishes.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::UsageError;
use crate::output::{Format, Sink};

#[derive(Debug, Parser)]
#[command(
    name = "strataclip",
    version,
    about = "Load-balance and gradient-clipping experiments"
)]
struct Cli {
    /// Directory for outputs when `--out` is not given; stdout if neither.
    #[arg(long, global = true, env = "STRATACLIP_OUT_DIR", value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Write output to this file instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,

    /// TOML file with option values; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic corpus and write one sequence length per line.
    GenCorpus(commands::GenCorpusArgs),
    /// Monte-Carlo per-GPU token balance of a batching strategy.
    Balance(commands::BalanceArgs),
    /// Iteration latency of the clipping disciplines under a pipeline model.
    Timeline(commands::TimelineArgs),
    /// Train the toy regression model under one or more clipping disciplines.
    Train(commands::TrainArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let sink = Sink {
        format: cli.format,
        out: cli.out,
        out_dir: cli.out_dir,
    };
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a, cfg, &sink),
        Command::Balance(a) => commands::balance(a, cfg, &sink),
        Command::Timeline(a) => commands::timeline(a, cfg, &sink),
        Command::Train(a) => commands::train(a, cfg, &sink),
    }
}

/// 2 for bad input of any kind, 1 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || e.downcast_ref::<strataclip::Error>()
                .is_some_and(strataclip::Error::is_validation)
    });
    if validation {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
