//! Planted sparse-linear data: a desk-scale stand-in for model hidden states,
//! sampled answers and attribution maps, plus the sparsity vs
//! generalisation-gap experiment.
//!
//! Each sample belongs to a group `g` with support `S_g`, weights `w` and
//! noise level `σ_g`. Features are i.i.d. standard normal. The model's
//! "belief" is `b = Σ_{j∈S_g} w_j x_j`; each of the `m` sampled answers is
//! `b + ε` with `ε ~ N(0, σ_g²)`, and the recorded target is
//! `b + ξ` with `ξ ~ N(0, (target_noise_scale·σ_g)²)`. Setting
//! `target_noise_scale = 0` makes the target the noiseless belief.
//!
//! Constants of the theoretical gap bound (`C`, `δ`) are not estimated; the
//! gap experiment only checks how the held-out minus training error moves
//! with the support size.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::spearman_rho;
use crate::data::{align, AlignedDataset, EmbeddingMatrix, ImportanceMatrix, ResponseTable, TargetVector};
use crate::error::{Error, Result};
use crate::experiment::{run_segment_experiment, ExperimentReport, SegmentConfig};
use crate::probe::{predict, ridge_fit, ProtocolConfig};
use crate::rng::{derived_rng, domain, Rng, RNG_ALGORITHM};
use crate::uncertainty::{score_dataset, Estimator};

pub const EMBEDDINGS_FILE: &str = "embeddings.emb";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const TARGETS_FILE: &str = "targets.jsonl";
pub const IMPORTANCE_FILE: &str = "importance.imp";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    /// Share of the `n` samples.
    pub fraction: f64,
    /// Number of useful features `s_g`.
    pub support: usize,
    /// Noise level `σ_g`.
    pub sigma: f64,
    /// Sampled answers per sample.
    pub responses: usize,
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

fn yes() -> bool {
    true
}

/// Generator settings. The noise variance of the theoretical bound is `σ_g²`;
/// its constants `C` and `δ` have no counterpart here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub d: usize,
    pub groups: Vec<GroupSpec>,
    #[serde(default = "one")]
    pub weight_scale: f64,
    #[serde(default)]
    pub master_seed: u64,
    /// Supports are prefixes of one shared feature order, with shared weights.
    #[serde(default = "yes")]
    pub nested_supports: bool,
    /// Target noise std as a multiple of `σ_g`. Must exceed the error a
    /// probe incurs on windows that mix two adjacent tiers, or the low-noise
    /// end of the r2 profile is dominated by that mixing error.
    #[serde(default = "two")]
    pub target_noise_scale: f64,
}

impl SyntheticConfig {
    /// `tiers` equal-sized groups with geometric noise levels and support sizes.
    #[allow(clippy::too_many_arguments)]
    pub fn tiered(
        n: usize,
        d: usize,
        tiers: usize,
        sigma: (f64, f64),
        support: (usize, usize),
        m: usize,
        master_seed: u64,
    ) -> Self {
        let geo = |lo: f64, hi: f64, g: usize| {
            if tiers == 1 {
                lo
            } else {
                lo * (hi / lo).powf(g as f64 / (tiers - 1) as f64)
            }
        };
        let groups = (0..tiers)
            .map(|g| GroupSpec {
                fraction: 1.0 / tiers as f64,
                support: geo(support.0 as f64, support.1 as f64, g).round() as usize,
                sigma: geo(sigma.0, sigma.1, g),
                responses: m,
            })
            .collect();
        Self {
            n,
            d,
            groups,
            weight_scale: 1.0,
            master_seed,
            nested_supports: true,
            target_noise_scale: two(),
        }
    }

    /// One group: no link between uncertainty and anything else.
    pub fn homogeneous(n: usize, d: usize, support: usize, sigma: f64, m: usize, master_seed: u64) -> Self {
        Self::tiered(n, d, 1, (sigma, sigma), (support, support), m, master_seed)
    }

    /// Three nested tiers with most samples in the quietest one, so a single
    /// probe fitted to all samples still explains every tier.
    pub fn nested_subsets(master_seed: u64) -> Self {
        Self::tiered(6000, 128, 3, (0.1, 2.0), (8, 64), 20, master_seed).with_fractions(&[0.6, 0.2, 0.2])
    }

    /// Replace the group shares (one per group, in order).
    pub fn with_fractions(mut self, fractions: &[f64]) -> Self {
        for (g, &f) in self.groups.iter_mut().zip(fractions) {
            g.fraction = f;
        }
        self
    }

    /// The eight-tier setting used for the correlation reproduction.
    pub fn eight_tier(master_seed: u64) -> Self {
        Self::tiered(8000, 128, 8, (0.1, 5.0), (8, 64), 20, master_seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n == 0 || self.d == 0 {
            return bad("n and d must be positive".into());
        }
        if self.groups.is_empty() {
            return bad("at least one group is required".into());
        }
        if !(self.weight_scale > 0.0 && self.weight_scale.is_finite()) {
            return bad(format!("weight_scale must be positive, got {}", self.weight_scale));
        }
        if !(self.target_noise_scale >= 0.0 && self.target_noise_scale.is_finite()) {
            return bad(format!(
                "target_noise_scale must be non-negative, got {}",
                self.target_noise_scale
            ));
        }
        let total: f64 = self.groups.iter().map(|g| g.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("group fractions sum to {total}, not 1"));
        }
        for (k, g) in self.groups.iter().enumerate() {
            if !(g.fraction > 0.0) {
                return bad(format!("group {k}: fraction must be positive"));
            }
            if g.support == 0 || g.support > self.d {
                return bad(format!("group {k}: support {} not in 1..={}", g.support, self.d));
            }
            if !(g.sigma >= 0.0 && g.sigma.is_finite()) {
                return bad(format!("group {k}: sigma must be finite and non-negative"));
            }
            if g.responses < 2 {
                return bad(format!("group {k}: need at least 2 responses, got {}", g.responses));
            }
        }
        if self.nested_supports && self.groups.windows(2).any(|w| w[0].support > w[1].support) {
            return bad("nested supports need nondecreasing support sizes".into());
        }
        Ok(())
    }

    /// Group sizes by cumulative rounding, so they always sum to `n`.
    pub fn group_sizes(&self) -> Vec<usize> {
        let last = self.groups.len() - 1;
        let mut cum = 0.0;
        let mut prev = 0usize;
        self.groups
            .iter()
            .enumerate()
            .map(|(k, g)| {
                cum += g.fraction;
                let end = if k == last {
                    self.n
                } else {
                    ((cum * self.n as f64).round() as usize).clamp(prev, self.n)
                };
                let size = end - prev;
                prev = end;
                size
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTruth {
    /// Feature indices, ascending.
    pub support: Vec<usize>,
    /// Weight of each support feature, aligned with `support`.
    pub weights: Vec<f64>,
    pub sigma: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub groups: Vec<GroupTruth>,
    /// Group of every row.
    pub row_group: Vec<usize>,
    pub rng: String,
    pub config: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBundle {
    pub embeddings: EmbeddingMatrix,
    pub responses: ResponseTable,
    pub targets: TargetVector,
    pub importance: ImportanceMatrix,
    pub truth: PlantedTruth,
}

impl SyntheticBundle {
    pub fn dataset(&self) -> Result<AlignedDataset> {
        align(&self.embeddings, &self.responses, &self.targets, Some(&self.importance))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.embeddings.write(dir.join(EMBEDDINGS_FILE))?;
        self.responses.write_jsonl(dir.join(RESPONSES_FILE))?;
        self.targets.write_jsonl(dir.join(TARGETS_FILE))?;
        self.importance.write(dir.join(IMPORTANCE_FILE))?;
        let truth = dir.join(TRUTH_FILE);
        let json = serde_json::to_string_pretty(&self.truth)?;
        fs::write(&truth, json + "\n").map_err(|e| Error::io(&truth, e))
    }

    /// Rows of each group, in dataset order.
    pub fn group_rows(&self, g: usize) -> Vec<usize> {
        (0..self.truth.row_group.len())
            .filter(|&i| self.truth.row_group[i] == g)
            .collect()
    }
}

fn random_weight(rng: &mut Rng, scale: f64) -> f64 {
    let magnitude = rng.random_range(0.5..=1.5) * scale;
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

fn sorted_support(idx: &[usize], weights: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let mut pairs: Vec<(usize, f64)> = idx.iter().copied().zip(weights.iter().copied()).collect();
    pairs.sort_by_key(|p| p.0);
    pairs.into_iter().unzip()
}

fn plant_supports(config: &SyntheticConfig, rng: &mut Rng) -> Vec<(Vec<usize>, Vec<f64>)> {
    let d = config.d;
    if config.nested_supports {
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(rng);
        let s_max = config.groups.iter().map(|g| g.support).max().unwrap_or(0);
        let w: Vec<f64> = (0..s_max).map(|_| random_weight(rng, config.weight_scale)).collect();
        config
            .groups
            .iter()
            .map(|g| sorted_support(&order[..g.support], &w[..g.support]))
            .collect()
    } else {
        config
            .groups
            .iter()
            .map(|g| {
                let idx = sample(rng, d, g.support).into_vec();
                let w: Vec<f64> = (0..g.support).map(|_| random_weight(rng, config.weight_scale)).collect();
                sorted_support(&idx, &w)
            })
            .collect()
    }
}

pub fn generate_planted(config: &SyntheticConfig) -> Result<SyntheticBundle> {
    config.validate()?;
    let (n, d) = (config.n, config.d);
    let master = config.master_seed;
    let sizes = config.group_sizes();

    let supports = plant_supports(config, &mut derived_rng(master, &[domain::SYNTH, 0]));

    let mut row_group: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &s)| std::iter::repeat_n(g, s)).collect();
    row_group.shuffle(&mut derived_rng(master, &[domain::SYNTH, 1]));

    let width = (n.max(2) - 1).to_string().len();
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:0width$}")).collect();

    let mut rng = derived_rng(master, &[domain::SYNTH, 2]);
    let off_std = 0.01 * config.weight_scale;
    let mut x = vec![0f32; n * d];
    let mut imp = vec![0f32; n * d];
    let mut responses = ResponseTable::new(1);
    let mut targets = TargetVector::new(1);
    let mut on_support = vec![None; d];
    for i in 0..n {
        let g = row_group[i];
        let spec = &config.groups[g];
        let (support, weights) = &supports[g];
        on_support.iter_mut().for_each(|v| *v = None);
        for (&j, &w) in support.iter().zip(weights) {
            on_support[j] = Some(w);
        }

        let row = &mut x[i * d..(i + 1) * d];
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) as f32;
        }
        let belief: f64 = support.iter().zip(weights).map(|(&j, &w)| w * row[j] as f64).sum();

        let irow = &mut imp[i * d..(i + 1) * d];
        for j in 0..d {
            irow[j] = match on_support[j] {
                Some(w) => (w * row[j] as f64).abs() as f32,
                None => (off_std * rng.sample::<f64, _>(StandardNormal)).abs() as f32,
            };
        }

        let xi: f64 = rng.sample(StandardNormal);
        targets.insert(ids[i].clone(), vec![belief + config.target_noise_scale * spec.sigma * xi])?;
        let answers = (0..spec.responses)
            .map(|_| vec![belief + spec.sigma * rng.sample::<f64, _>(StandardNormal)])
            .collect();
        responses.insert(ids[i].clone(), answers)?;
    }

    let groups = supports
        .into_iter()
        .zip(&config.groups)
        .zip(&sizes)
        .map(|(((support, weights), spec), &size)| GroupTruth {
            support,
            weights,
            sigma: spec.sigma,
            size,
        })
        .collect();

    Ok(SyntheticBundle {
        embeddings: EmbeddingMatrix::new(ids.clone(), d, x)?,
        responses,
        targets,
        importance: ImportanceMatrix::new(ids, d, imp)?,
        truth: PlantedTruth {
            groups,
            row_group,
            rng: RNG_ALGORITHM.to_owned(),
            config: config.clone(),
        },
    })
}

/// Generate a bundle and run the full variance-scored segment experiment on it.
pub fn end_to_end_check(
    config: &SyntheticConfig,
    window: usize,
    stride: usize,
    protocol: &ProtocolConfig,
) -> Result<ExperimentReport> {
    let bundle = generate_planted(config)?;
    let dataset = bundle.dataset()?;
    let scores = score_dataset(&dataset, Estimator::Variance, 2)?;
    let segment = SegmentConfig {
        window,
        stride,
        top_k: None,
        protocol: protocol.clone(),
    };
    let mut report = run_segment_experiment(&dataset, &scores, &segment)?;
    let mut sigmas: Vec<f64> = config.groups.iter().map(|g| g.sigma).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    if sigmas.len() < 3 {
        report.warnings.push(format!(
            "only {} distinct noise tier(s); the correlation has no planted trend to recover",
            sigmas.len()
        ));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapConfig {
    pub d: usize,
    pub s_values: Vec<usize>,
    /// Training samples per trial.
    pub n: usize,
    /// Held-out samples per trial, standing in for the population risk.
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    pub lambda: f64,
    pub trials: usize,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "one")]
    pub weight_scale: f64,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_n_test() -> usize {
    512
}

impl GapConfig {
    pub fn new(d: usize, s_values: Vec<usize>, n: usize, lambda: f64, trials: usize) -> Self {
        Self {
            d,
            s_values,
            n,
            n_test: default_n_test(),
            lambda,
            trials,
            sigma: 1.0,
            weight_scale: 1.0,
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 || self.n < 2 || self.n_test == 0 || self.trials == 0 {
            return bad("need d >= 1, n >= 2, n_test >= 1 and trials >= 1".into());
        }
        if self.s_values.is_empty() {
            return bad("s_values is empty".into());
        }
        if let Some(&s) = self.s_values.iter().find(|&&s| s == 0 || s > self.d) {
            return bad(format!("support size {s} not in 1..={}", self.d));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(self.weight_scale > 0.0) {
            return bad("sigma must be non-negative and weight_scale positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub s: usize,
    pub mean_gap: f64,
    pub std_gap: f64,
    pub mean_train_mse: f64,
    pub mean_test_mse: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapTable {
    pub config: GapConfig,
    pub rows: Vec<GapRow>,
    /// Spearman correlation of support size against mean gap.
    pub trend: Option<f64>,
    pub rng: &'static str,
}

impl GapTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,mean_gap,std_gap,mean_train_mse,mean_test_mse,trials\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.s, r.mean_gap, r.std_gap, r.mean_train_mse, r.mean_test_mse, r.trials
            )
            .unwrap();
        }
        out
    }
}

fn gap_trial(config: &GapConfig, s_index: usize, trial: usize) -> Result<(f64, f64)> {
    let s = config.s_values[s_index];
    let d = config.d;
    let mut rng = derived_rng(config.master_seed, &[domain::GAP, s_index as u64, trial as u64]);
    let support = sample(&mut rng, d, s).into_vec();
    let weights: Vec<f64> = (0..s).map(|_| random_weight(&mut rng, config.weight_scale)).collect();
    let mut draw = |rows: usize| {
        let x = DMatrix::from_fn(rows, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(rows, 1, |i, _| {
            support.iter().zip(&weights).map(|(&j, &w)| w * x[(i, j)]).sum::<f64>()
                + config.sigma * rng.sample::<f64, _>(StandardNormal)
        });
        (x, y)
    };
    let (x, y) = draw(config.n);
    let (xt, yt) = draw(config.n_test);
    let probe = ridge_fit(&x, &y, config.lambda)?;
    let mse = |x: &DMatrix<f64>, y: &DMatrix<f64>| -> Result<f64> {
        Ok((predict(&probe, x)? - y).norm_squared() / y.nrows() as f64)
    };
    Ok((mse(&x, &y)?, mse(&xt, &yt)?))
}

/// Held-out minus training MSE of a fixed-`lambda` ridge fit, per support size.
pub fn oracle_gap_experiment(config: &GapConfig) -> Result<GapTable> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..config.s_values.len())
        .flat_map(|k| (0..config.trials).map(move |t| (k, t)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(k, t)| gap_trial(config, k, t))
        .collect::<Result<Vec<_>>>()?;

    let rows: Vec<GapRow> = results
        .chunks(config.trials)
        .zip(&config.s_values)
        .map(|(chunk, &s)| {
            let k = chunk.len() as f64;
            let gaps: Vec<f64> = chunk.iter().map(|(tr, te)| te - tr).collect();
            let mean_gap = gaps.iter().sum::<f64>() / k;
            let var = if chunk.len() > 1 {
                gaps.iter().map(|g| (g - mean_gap).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            GapRow {
                s,
                mean_gap,
                std_gap: var.sqrt(),
                mean_train_mse: chunk.iter().map(|c| c.0).sum::<f64>() / k,
                mean_test_mse: chunk.iter().map(|c| c.1).sum::<f64>() / k,
                trials: chunk.len(),
            }
        })
        .collect();
    let s: Vec<f64> = rows.iter().map(|r| r.s as f64).collect();
    let g: Vec<f64> = rows.iter().map(|r| r.mean_gap).collect();
    Ok(GapTable {
        config: config.clone(),
        trend: spearman_rho(&s, &g).ok(),
        rows,
        rng: RNG_ALGORITHM,
    })
}
