//! `mostfuse` command-line front end.
//!
//! Every subcommand accepts `--config FILE.json`; keys are the long flag names
//! in snake_case. Flags given on the command line win over the file, and the
//! file wins over built-in defaults.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

/// Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<mostfuse::Error> for CliError {
    fn from(e: mostfuse::Error) -> Self {
        use mostfuse::Error as E;
        let msg = e.to_string();
        match e {
            E::Io(_) => CliError::Io(msg),
            E::NonFiniteLoss { .. } | E::QuadratureNotConverged { .. } => CliError::Numerical(msg),
            _ => CliError::Validation(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Declares an argument struct whose fields are all optional so that flags
/// can be layered over a `--config` file.
macro_rules! layered_args {
    ($(#[$sm:meta])* $name:ident { $( $(#[$m:meta])* $field:ident : $ty:ty ),* $(,)? }) => {
        $(#[$sm])*
        #[derive(Debug, Clone, Default, Args, Deserialize)]
        #[command(allow_negative_numbers = true)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            /// JSON file supplying values for flags not given on the command line.
            #[arg(long)]
            #[serde(skip)]
            pub config: Option<PathBuf>,
            $( $(#[$m])* pub $field: Option<$ty>, )*
        }

        impl $name {
            pub fn resolve(self) -> CliResult<Self> {
                let Some(path) = self.config.clone() else { return Ok(self) };
                let file: $name = output::read_json(&path)?;
                Ok(Self { config: self.config, $( $field: self.$field.or(file.$field), )* })
            }
        }
    };
}

layered_args!(
    /// Write synthetic train/val/test CSVs and a metadata sidecar.
    GenerateArgs {
        /// Number of classes.
        #[arg(long)]
        classes: usize,
        /// Samples per class (ignored when --split-counts is given).
        #[arg(long)]
        per_class: usize,
        /// Feature dimension of each modality, comma separated.
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        /// Class-mean spacing of each modality in within-class standard deviations.
        #[arg(long, value_delimiter = ',')]
        sep: Vec<f64>,
        #[arg(long)]
        seed: u64,
        /// Explicit train,val,test sizes instead of a 70/15/15 split.
        #[arg(long, value_delimiter = ',')]
        split_counts: Vec<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    }
);

layered_args!(
    /// Train a classifier and write a checkpoint plus run artifact.
    TrainArgs {
        /// Directory written by generate-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        lr: f64,
        #[arg(long)]
        batch_size: usize,
        #[arg(long)]
        lambda: f64,
        /// Seeds initialization and shuffling.
        #[arg(long)]
        seed: u64,
        /// Encoder hidden layer sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        hidden: Vec<usize>,
        /// relu or tanh.
        #[arg(long)]
        activation: String,
        /// Only train the evidential heads.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        freeze_encoders: bool,
        /// Keep the epoch with the lowest validation loss.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        select_best: bool,
    }
);

layered_args!(
    /// Metrics of a checkpoint on one split.
    EvaluateArgs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val or test.
        #[arg(long)]
        split: String,
        /// Number of ECE bins.
        #[arg(long)]
        bins: usize,
        /// unweighted or quadratic.
        #[arg(long)]
        kappa: String,
        /// Directory for metrics.json and metrics.csv; stdout only when absent.
        #[arg(long)]
        out: PathBuf,
    }
);

layered_args!(
    /// Metrics under Gaussian corruption of one modality at several noise levels.
    SweepArgs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        /// Noise standard deviations in standardized feature units.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        /// 1-based modalities to corrupt, one sweep each.
        #[arg(long, value_delimiter = ',')]
        modality: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        noise_seeds: Vec<u64>,
        #[arg(long)]
        bins: usize,
        #[arg(long)]
        kappa: String,
        /// Directory for sweep.json and sweep.csv; stdout only when absent.
        #[arg(long)]
        out: PathBuf,
    }
);

layered_args!(
    /// Uncertainty density tables, optionally under corruption of one modality.
    ReportArgs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        /// Histogram bins.
        #[arg(long)]
        bins: usize,
        /// 1-based modality to corrupt.
        #[arg(long)]
        modality: usize,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        noise_seed: u64,
        /// Directory for density.json and density.csv; stdout only when absent.
        #[arg(long)]
        out: PathBuf,
    }
);

layered_args!(
    /// Fuse Student's t distributions listed in a JSON file.
    FuseArgs {
        /// JSON array of [u, sigma, v] triples or {"u", "sigma", "v"} objects.
        #[arg(long = "in")]
        #[serde(rename = "in")]
        input: PathBuf,
    }
);

#[derive(Debug, Parser)]
#[command(name = "mostfuse", version, about = "Evidential multimodal fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    GenerateData(GenerateArgs),
    Train(TrainArgs),
    Evaluate(EvaluateArgs),
    NoiseSweep(SweepArgs),
    Report(ReportArgs),
    Fuse(FuseArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenerateData(a) => commands::generate_data(a.resolve()?),
        Command::Train(a) => commands::train(a.resolve()?),
        Command::Evaluate(a) => commands::evaluate(a.resolve()?),
        Command::NoiseSweep(a) => commands::noise_sweep(a.resolve()?),
        Command::Report(a) => commands::report(a.resolve()?),
        Command::Fuse(a) => commands::fuse(a.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
