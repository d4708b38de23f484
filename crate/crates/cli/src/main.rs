//! `choicekit` command-line interface.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{InterpretArgs, SearchArgs, SynthArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "choicekit", version, about = "Train, search and interpret discrete choice models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the data 4:1:1 and train one model.
    Train(TrainArgs),
    /// Random hyperparameter search with k-fold cross-validation.
    Search(SearchArgs),
    /// Probability sweeps, elasticities or IIA probes of trained models.
    Interpret(InterpretArgs),
    /// Draw a synthetic dataset from a known utility process.
    Synth(SynthArgs),
}

/// A failed run: the stage that failed, why, and the exit code.
#[derive(Debug)]
pub struct Failure {
    pub stage: String,
    pub message: String,
    pub code: u8,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

impl Failure {
    pub fn usage(stage: &str, message: impl Into<String>) -> Self {
        Failure {
            stage: stage.into(),
            message: message.into(),
            code: EXIT_USAGE,
        }
    }

    pub fn data(stage: &str, message: impl Into<String>) -> Self {
        Failure {
            stage: stage.into(),
            message: message.into(),
            code: EXIT_DATA,
        }
    }

    /// Classify a library error raised during `stage`.
    pub fn from_lib(stage: &str, e: choicekit::Error) -> Self {
        use choicekit::Error as E;
        let code = match &e {
            E::Divergence { .. } => EXIT_DIVERGED,
            E::InvalidArgument(_) => EXIT_USAGE,
            E::Dimension { .. }
            | E::NonFinite(_)
            | E::Data { .. }
            | E::Schema(_)
            | E::ConstantColumn(_)
            | E::Io { .. }
            | E::Csv(_)
            | E::Json(_) => EXIT_DATA,
        };
        Failure {
            stage: stage.into(),
            message: e.to_string(),
            code,
        }
    }
}

/// Attach a stage name to library results.
pub trait Stage<T> {
    fn stage(self, stage: &str) -> Result<T, Failure>;
}

impl<T> Stage<T> for choicekit::Result<T> {
    fn stage(self, stage: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::from_lib(stage, e))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Search(a) => commands::search(a),
        Command::Interpret(a) => commands::interpret(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("choicekit: {} failed: {}", f.stage, f.message);
            ExitCode::from(f.code)
        }
    }
}
