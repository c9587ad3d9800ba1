use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use instruct_pcg::cli::{self, CliOptions, Command};
use instruct_pcg::evalbench::VariantId;

#[derive(Parser)]
#[command(name = "instruct-pcg", version, about = "Instruction-conditioned level generation")]
struct Args {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list and the dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory; outputs go to <out>/<config name>/.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Sequential, fully seeded execution (always the case; accepted for scripts).
    #[arg(long, global = true)]
    reproducible: bool,
    /// Model variant, e.g. MIPCGRL_FULL or IPCGRL_SINGLEHEAD.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<VariantId>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the single- and multi-objective instruction datasets.
    Dataset,
    /// Train the instruction encoder for each seed.
    TrainEncoder,
    /// Train the conditioned PPO agent for each seed.
    TrainAgent,
    /// Evaluate trained agents and write Progress reports.
    Eval,
    /// Train and evaluate every configured variant.
    Ablate,
    /// Read instructions and print generated levels with their Progress.
    Generate {
        /// Instruction to run; may repeat. Without it, lines are read from stdin.
        #[arg(long = "instruction")]
        instructions: Vec<String>,
    },
    /// Write latent embeddings, their 2D projection and cluster separation.
    ExportEmbeddings,
}

fn parse_variant(s: &str) -> Result<VariantId, String> {
    s.parse().map_err(|e: instruct_pcg::Error| e.to_string())
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let mut opts = CliOptions {
        config: args.config,
        seed: args.seed,
        out: args.out,
        reproducible: args.reproducible,
        variant: args.variant,
        instructions: Vec::new(),
    };
    let command = match args.command {
        Cmd::Dataset => Command::Dataset,
        Cmd::TrainEncoder => Command::TrainEncoder,
        Cmd::TrainAgent => Command::TrainAgent,
        Cmd::Eval => Command::Eval,
        Cmd::Ablate => Command::Ablate,
        Cmd::Generate { instructions } => {
            opts.instructions = instructions;
            Command::Generate
        }
        Cmd::ExportEmbeddings => Command::ExportEmbeddings,
    };
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    let mut output = std::io::stdout().lock();
    cli::run(command, &opts, &mut input, &mut output).context("command failed")?;
    Ok(())
}
