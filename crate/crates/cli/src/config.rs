//! JSON run configuration. Every key is optional; command-line flags win
//! over file values, which win over built-in defaults.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use ugprobe::masking::{MaskMode, SubsetStrategy};
use ugprobe::probe::ProtocolConfig;
use ugprobe::synthetic::{GapConfig, SyntheticConfig};
use ugprobe::uncertainty::Estimator;

/// A problem with what the user asked for (exit code 2).
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Eight noise tiers with nested supports (n=8000, d=128).
    EightTier,
    /// One tier: no planted link between uncertainty and probe quality.
    Homogeneous,
    /// Three nested tiers, 60% of samples in the quietest, for the subset comparison.
    Nested,
}

impl Preset {
    pub fn config(self, seed: u64) -> SyntheticConfig {
        match self {
            Preset::EightTier => SyntheticConfig::eight_tier(seed),
            Preset::Homogeneous => SyntheticConfig::homogeneous(8000, 32, 8, 1.0, 20, seed),
            Preset::Nested => SyntheticConfig::nested_subsets(seed),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub embeddings: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub importance: Option<PathBuf>,
    pub response_dim: Option<usize>,
    pub estimator: Option<Estimator>,
    pub min_responses: Option<usize>,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub top_k: Option<usize>,
    pub protocol: Option<ProtocolConfig>,
    /// Master seed; overrides `protocol.master_seed` and `synthetic.master_seed`.
    pub seed: Option<u64>,
    pub fractions: Option<Vec<f64>>,
    pub mode: Option<MaskMode>,
    pub subset_size: Option<usize>,
    pub strategy: Option<SubsetStrategy>,
    pub random_control: Option<bool>,
    pub preset: Option<Preset>,
    pub synthetic: Option<SyntheticConfig>,
    pub gap: Option<GapConfig>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| input_error(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| input_error(format!("config {}: {e}", path.display())))
    }
}

/// `flag`, else `file`, else `default`.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn require<T>(flag: Option<T>, file: Option<T>, name: &str) -> anyhow::Result<T> {
    flag.or(file).ok_or_else(|| {
        input_error(format!(
            "missing --{name} (or \"{}\" in the config file)",
            name.replace('-', "_")
        ))
    })
}

pub fn protocol(
    file: &FileConfig,
    seeds: Option<usize>,
    lambda_grid: Option<Vec<f64>>,
    seed: Option<u64>,
) -> anyhow::Result<ProtocolConfig> {
    let mut p = file.protocol.clone().unwrap_or_default();
    if let Some(k) = seeds {
        p.n_seeds = k;
    }
    if let Some(grid) = lambda_grid {
        p.lambda_grid = grid;
    }
    if let Some(s) = seed.or(file.seed) {
        p.master_seed = s;
    }
    p.validate()?;
    Ok(p)
}
