//! `narem`: data generation, training, EM, decoding and evaluation.
//!
//! Exit codes: 0 success, 1 error (including usage errors), 2 a failed
//! `--assert`.

mod check;
mod commands;
mod config;
mod logging;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::AssertionFailed;
use config::CommonArgs;

#[derive(Parser, Debug)]
#[command(
    name = "narem",
    version,
    about = "Non-autoregressive sequence generation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/valid/test TSVs and a vocabulary for a synthetic task.
    GenData(commands::GenData),
    /// Train an AR or NAR model from scratch.
    Train(commands::Train),
    /// Replace a corpus's targets with an AR model's beam outputs.
    Distill(commands::Distill),
    /// Run alternating AR/NAR optimisation into a run directory.
    Em(commands::Em),
    /// Translate sources with a trained model.
    Decode(commands::Decode),
    /// Score a model on a reference corpus.
    Eval(commands::Eval),
    /// Render an eval report or an EM run as a table.
    Report(commands::Report),
}

impl Command {
    fn common(&self) -> Option<&CommonArgs> {
        Some(match self {
            Command::GenData(c) => c.common(),
            Command::Train(c) => c.common(),
            Command::Distill(c) => c.common(),
            Command::Em(c) => c.common(),
            Command::Decode(c) => c.common(),
            Command::Eval(c) => c.common(),
            Command::Report(_) => return None,
        })
    }

    fn run(&self) -> anyhow::Result<()> {
        match self {
            Command::GenData(c) => c.run(),
            Command::Train(c) => c.run(),
            Command::Distill(c) => c.run(),
            Command::Em(c) => c.run(),
            Command::Decode(c) => c.run(),
            Command::Eval(c) => c.run(),
            Command::Report(c) => c.run(),
        }
    }
}

fn setup(common: Option<&CommonArgs>) -> anyhow::Result<()> {
    logging::init(common.and_then(|c| c.log_file.as_deref()))?;
    if let Some(n) = common.and_then(|c| c.threads) {
        if n == 0 {
            anyhow::bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = setup(cli.command.common()).and_then(|()| cli.command.run());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<AssertionFailed>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
