//! Pipeline driver for MBR distillation of error-span detection models:
//! candidate generation, MBR scoring, dataset construction, the iterated
//! loop, meta-evaluation, and reference loss verification.

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "esd-distill",
    version,
    about = "MBR distillation pipeline for error span detection",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample candidate annotations for every segment.
    Generate(commands::GenerateArgs),
    /// MBR-score a candidates file (optionally reporting utility variance).
    Score(commands::ScoreArgs),
    /// Turn scored candidates into an SFT/DPO/KTO dataset.
    BuildDataset(commands::BuildDatasetArgs),
    /// Run the full cycle for T iterations (mock) or one handoff (http).
    Loop(commands::LoopArgs),
    /// Score predictions against gold annotations.
    Evaluate(commands::EvaluateArgs),
    /// Evaluate reference training-loss cases from a JSONL file.
    VerifyLoss(commands::VerifyLossArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Score(args) => commands::score(args),
        Command::BuildDataset(args) => commands::build_dataset(args),
        Command::Loop(args) => commands::run_loop(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::VerifyLoss(args) => commands::verify_loss(args),
    };
    if let Err(err) = result {
        eprintln!("{}", err.stderr_json());
        std::process::exit(err.exit_code());
    }
}
