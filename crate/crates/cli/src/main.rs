mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ugprobe::masking::{MaskMode, SubsetStrategy};
use ugprobe::uncertainty::Estimator;

use crate::config::{InputError, Preset};

/// Uncertainty-sorted probing, correlation and feature-masking experiments.
///
/// Exit codes: 0 success, 2 usage or input error, 1 internal failure.
#[derive(Parser, Debug)]
#[command(name = "ugprobe", version)]
pub struct Cli {
    /// Cap on worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Score every sample's response uncertainty.
    Uncertainty(UncertaintyArgs),
    /// Sliding-window probe sweep over uncertainty-sorted samples.
    ProbeSweep(SweepArgs),
    /// Frozen-probe evaluation on importance-masked test rows.
    MaskEval(MaskArgs),
    /// Remove-and-retrain on importance-masked data.
    Roar(MaskArgs),
    /// Masking curves for the low, mid and high uncertainty subsets.
    Subsets(SubsetArgs),
    /// Planted-model data and checks.
    #[command(subcommand)]
    Synthetic(SyntheticCommand),
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct Inputs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub responses: Option<PathBuf>,
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub importance: Option<PathBuf>,
    /// Dimensionality of free-text numeric responses (1 or 2).
    #[arg(long)]
    pub response_dim: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct Scoring {
    #[arg(long)]
    pub estimator: Option<Estimator>,
    /// Samples with fewer valid responses are excluded.
    #[arg(long)]
    pub min_responses: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct Protocol {
    /// Repetitions averaged per probe.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comma-separated ridge penalties.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug, Default)]
pub struct Masking {
    /// Comma-separated keep-fractions in (0, 1].
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub mode: Option<MaskMode>,
}

#[derive(Args, Debug)]
pub struct UncertaintyArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub scoring: Scoring,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub scoring: Scoring,
    #[command(flatten)]
    pub protocol: Protocol,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Keep only the k most uncertain samples before windowing.
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub protocol: Protocol,
    #[command(flatten)]
    pub masking: Masking,
    /// Also run a random mask of the same sizes.
    #[arg(long)]
    pub random_control: bool,
}

#[derive(Args, Debug)]
pub struct SubsetArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub scoring: Scoring,
    #[command(flatten)]
    pub protocol: Protocol,
    #[command(flatten)]
    pub masking: Masking,
    #[arg(long)]
    pub subset_size: Option<usize>,
    /// frozen (probe trained on all samples) or retrain (within each subset).
    #[arg(long)]
    pub strategy: Option<SubsetStrategy>,
}

#[derive(Subcommand, Debug)]
pub enum SyntheticCommand {
    /// Write a planted bundle in the standard file formats.
    Generate(GenerateArgs),
    /// Generate a bundle and run the probe sweep on it.
    E2e(E2eArgs),
    /// Held-out minus training error of ridge fits against support size.
    OracleTrend(TrendArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Args, Debug)]
pub struct E2eArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[command(flatten)]
    pub protocol: Protocol,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrendArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub d: Option<usize>,
    /// Comma-separated support sizes.
    #[arg(long, value_delimiter = ',')]
    pub s_values: Option<Vec<usize>>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InputError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ugprobe::Error>() {
            return if e.is_input_error() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = std::panic::catch_unwind(|| commands::run(cli));
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
        Err(_) => ExitCode::from(1),
    }
}
