//! `ucdr`: generate data, train both phases, evaluate and retrieve.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ucdr_core::model::PromptSource;
use ucdr_core::Error;

#[derive(Parser, Debug)]
#[command(name = "ucdr", version, about = "Prompt-adapted cross-domain retrieval on synthetic token grids")]
struct Cli {
    /// Run config (JSON). Defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true, env = "UCDR_SEED")]
    seed: Option<u64>,
    /// Worker threads for embedding (1 keeps runs deterministic).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its split.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one phase and write a checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Phase-1 checkpoint to build on (phase 2 only).
        #[arg(long)]
        phase1: Option<PathBuf>,
        /// Checkpoint of an interrupted run of the same phase to continue.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Epoch log (one JSON object per line); defaults to <out>.log.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Write the checkpoint and exit after this epoch.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Evaluate retrieval on the test split and write report.json.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Prompt source for query and gallery images.
        #[arg(long, value_enum, default_value = "tpg")]
        mode: Mode,
        /// Trained checkpoint; not needed for mode none.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Report file (ablation results when --ablate is given).
        #[arg(long)]
        out: PathBuf,
        /// Optional per-query rankings as CSV.
        #[arg(long)]
        rankings: Option<PathBuf>,
        /// Optional query and gallery embeddings as tensors.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Train and evaluate the whole ablation grid instead; prints a table.
        #[arg(long)]
        ablate: bool,
    },
    /// Print the top-k gallery items for some query samples.
    Retrieve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated sample ids.
        #[arg(long, value_delimiter = ',', required = true)]
        query_ids: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value = "tpg")]
        mode: Mode,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: Scope,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    None,
    Phase1,
    Tpg,
    Uniform,
    Probe,
}

impl From<Mode> for PromptSource {
    fn from(m: Mode) -> Self {
        match m {
            Mode::None => PromptSource::None,
            Mode::Phase1 => PromptSource::Phase1,
            Mode::Tpg => PromptSource::Tpg,
            Mode::Uniform => PromptSource::Uniform,
            Mode::Probe => PromptSource::Probe,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scope {
    Losses,
    Tpg,
    All,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "io" | "format" | "json" => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
