//! `kblm`: generate synthetic benchmarks, train, evaluate and inspect
//! knowledge-enhanced language models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{Benchmark, Probe, Stage, Workspace};

#[derive(Parser)]
#[command(name = "kblm", version, about = "Knowledge-enhanced masked language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark and a run.toml for it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "facts")]
        benchmark: Benchmark,
        /// TOML file with generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a generator setting, e.g. `--set facts=200`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a training stage, resuming from the run's checkpoint if present.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Pause after this many updates.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint with one probe.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        probe: Probe,
        #[arg(long)]
        kb: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Show candidate mentions, scores and chosen entities for a sentence.
    Link {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sentence: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print the bundled worked KAR instance with every intermediate.
    Trace {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, benchmark, config, set, seed } => commands::synth(benchmark, &out, config.as_deref(), &set, seed),
        Command::Train { config, stage, set, max_steps } => {
            let ws = Workspace::open(&config, &set)?;
            commands::train(&ws, stage, max_steps)
        }
        Command::Eval { config, probe, kb, checkpoint, set } => {
            let ws = Workspace::open(&config, &set)?;
            commands::evaluate(&ws, probe, kb.as_deref(), checkpoint.as_deref()).map(|_| ())
        }
        Command::Link { config, sentence, top_k, json, checkpoint, set } => {
            let ws = Workspace::open(&config, &set)?;
            let spans = commands::link_sentence(&ws, &sentence, checkpoint.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&spans)?);
            } else {
                commands::print_links(&spans, top_k);
            }
            Ok(())
        }
        Command::Trace { out } => commands::trace(out.as_deref()),
    }
}

/// 1 for bad input or configuration, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<kblm::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
