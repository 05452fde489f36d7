use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifacts;
mod commands;
mod compare;

/// Exit status 1: the run itself failed.
pub const EXIT_RUNTIME: u8 = 1;
/// Exit status 2: bad configuration or input file.
pub const EXIT_INPUT: u8 = 2;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<lsgfn::Error> for CliError {
    fn from(e: lsgfn::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_err(what: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{what}: {e}"))
}

#[derive(Parser)]
#[command(name = "lsgfn", version, about = "Train and evaluate local-search GFlowNets on sequence tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write manifest, rounds.csv, checkpoint and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw on-policy samples from a checkpoint and report metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for samples.csv and metrics.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact partition function, target mean, reward quantiles and mode inventory.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run several variants over seeds and print a mean/std table.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `label:key=value,key=value`; defaults to plain TB against TB with local search.
        #[arg(long = "variant")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Count modes in a file of sequences (first column, header optional).
    Modes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed } => commands::train(&config, &out, seed),
        Command::Eval { checkpoint, samples, seed, out } => commands::eval(&checkpoint, samples, seed, out.as_deref()),
        Command::Oracle { config } => commands::oracle(&config),
        Command::Compare { config, out, variants, seeds } => compare::compare(&config, &out, &variants, &seeds),
        Command::Modes { config, samples } => commands::modes(&config, &samples),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
