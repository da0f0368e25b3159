use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Train and inspect supermasks over weight-tied random Transformers.
#[derive(Debug, Parser)]
#[command(name = "onelayer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train scores and write an inference checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a task split.
    Eval(EvalArgs),
    /// Train once per retention ratio and compare final metrics.
    Sweep(SweepArgs),
    /// Report the header, tensors, mask densities and checksums of a checkpoint.
    Inspect(InspectArgs),
    /// Print the closed-form storage footprint of a configuration.
    Footprint(FootprintArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TieArg {
    #[value(name = "one_layer", alias = "one-layer")]
    OneLayer,
    #[value(name = "per_layer", alias = "per-layer")]
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Kaiming,
    Xavier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// `random` or `file:<path>`.
#[derive(Clone, Debug, PartialEq, Eq)]
enum EmbeddingArg {
    Random,
    File(PathBuf),
}

fn parse_embedding(s: &str) -> Result<EmbeddingArg, String> {
    match s {
        "random" => Ok(EmbeddingArg::Random),
        _ => match s.strip_prefix("file:") {
            Some(p) if !p.is_empty() => Ok(EmbeddingArg::File(PathBuf::from(p))),
            _ => Err(format!("expected `random` or `file:<path>`, got `{s}`")),
        },
    }
}

/// Settings shared by every command that builds a model.
#[derive(Clone, Debug, Args)]
struct Overrides {
    /// Run configuration (JSON); defaults to the built-in reference.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of each weight tensor kept by its mask, in (0, 1].
    #[arg(long)]
    sigma: Option<f32>,
    #[arg(long, value_enum)]
    tie_mode: Option<TieArg>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long, value_enum)]
    sigma_scaling: Option<Switch>,
    /// `random` or `file:<path>` for frozen pretrained embeddings.
    #[arg(long, value_parser = parse_embedding)]
    embedding: Option<EmbeddingArg>,
    /// Override the step budget.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// JSON Lines metrics file.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Inference checkpoint to write.
    #[arg(long, default_value = "model.oltc")]
    out: PathBuf,
    /// Also write a resumable checkpoint (scores and optimizer state).
    #[arg(long)]
    resume_out: Option<PathBuf>,
    /// Continue from a resumable checkpoint instead of starting fresh.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Valid,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Run configuration providing the task; defaults to the reference.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated retention ratios.
    #[arg(long, value_delimiter = ',', required = true)]
    sigmas: Vec<f32>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct FootprintArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Also report the other tie mode side by side.
    #[arg(long, value_enum)]
    compare: Option<TieArg>,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Footprint(a) => commands::footprint(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    }
}
