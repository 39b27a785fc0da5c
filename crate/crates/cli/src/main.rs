use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod eval;
mod generate;
mod report;
mod run_config;
mod train;

/// Train, sample and evaluate a toy early-fusion mixed-modal model.
#[derive(Debug, Parser)]
#[command(name = "chamtoy", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the procedurally generated quadrant-colour corpus.
    SynthCorpus(train::SynthArgs),
    /// Train the BPE and image codebook on a corpus.
    TokenizerTrain(train::TokenizerArgs),
    /// Pre-train a model, or run an ablation pair.
    Train(train::TrainArgs),
    /// Fine-tune a checkpoint on the corpus's prompt/answer records.
    Sft(train::SftArgs),
    /// Sample a mixed-modal document from a checkpoint.
    Generate(generate::GenerateArgs),
    /// Win-rate tables and inter-annotator agreement from CSV judgements.
    Eval(eval::EvalArgs),
    /// Summarise a run's loss.csv and write a plot-ready CSV.
    MonitorReport(report::ReportArgs),
}

/// Layering shared by every command that builds a run configuration.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed; falls back to $CHAMTOY_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

/// What a successful command ended with.
pub enum Outcome {
    Done,
    /// Training stopped on the divergence flag.
    Halted,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<chamtoy::Error>() {
            return match e {
                chamtoy::Error::Config(_) => 1,
                chamtoy::Error::Diverged { .. } => 3,
                _ => 2,
            };
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
    let result = match cli.command {
        Command::SynthCorpus(a) => train::synth(a),
        Command::TokenizerTrain(a) => train::tokenizer(a),
        Command::Train(a) => train::train(a),
        Command::Sft(a) => train::sft(a),
        Command::Generate(a) => generate::run(a),
        Command::Eval(a) => eval::run(a),
        Command::MonitorReport(a) => report::run(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Halted) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
