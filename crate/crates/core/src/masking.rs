//! Importance-guided feature masking: frozen-probe remove-and-test,
//! remove-and-retrain, and the low/mid/high uncertainty subset comparison.
//!
//! Masked features are set to `0.0`. Keeping a fraction `f` of `d` features
//! keeps `ceil(f * d)` of them (at least one), chosen by descending
//! `|importance|` with ties going to the lower feature index. Because the
//! feature order is fixed before any fraction is applied, masks for nested
//! fractions are nested.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AlignedDataset, ImportanceMatrix};
use crate::error::{Error, Result};
use crate::probe::{evaluate, repeated_runs, train_probe_repeated, ProbeMetrics, ProbeRun, ProtocolConfig, RepeatedMetrics};
use crate::rng::{domain, rng_from_seed};
use crate::segmentation::{quantile_subsets, sort_desc_by_uncertainty};
use crate::uncertainty::UncertaintyVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Each row keeps its own most important features.
    #[default]
    PerSample,
    /// One feature set for all rows, ranked by mean `|importance|`.
    Global,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::PerSample => "per-sample",
            MaskMode::Global => "global",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-sample" | "per_sample" => Ok(MaskMode::PerSample),
            "global" => Ok(MaskMode::Global),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask mode {other:?} (expected per-sample or global)"
            ))),
        }
    }
}

pub fn default_fractions() -> Vec<f64> {
    vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0]
}

/// Number of features kept at `fraction`; the small offset stops products
/// such as `0.3 * 10 = 3.0000000000000004` from rounding up.
pub fn keep_count(fraction: f64, d: usize) -> usize {
    ((fraction * d as f64 - 1e-9).ceil() as usize).clamp(1, d)
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("keep fraction must be in (0, 1], got {f}")))
    }
}

pub fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::InvalidArgument("fraction grid is empty".into()));
    }
    for &f in fractions {
        check_fraction(f)?;
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("fractions must be strictly increasing".into()));
    }
    Ok(())
}

fn descending_order(scores: impl Iterator<Item = f64>) -> Vec<u32> {
    let s: Vec<f64> = scores.collect();
    let mut order: Vec<u32> = (0..s.len() as u32).collect();
    order.sort_by(|&a, &b| s[b as usize].total_cmp(&s[a as usize]).then(a.cmp(&b)));
    order
}

/// Feature priority per row (or one shared order in global mode).
#[derive(Debug, Clone)]
pub struct FeatureRanking {
    d: usize,
    mode: MaskMode,
    orders: Vec<Vec<u32>>,
}

impl FeatureRanking {
    pub fn new(importance: &ImportanceMatrix, mode: MaskMode) -> Self {
        let m = &importance.matrix;
        let (n, d) = (m.nrows(), m.ncols());
        let orders = match mode {
            MaskMode::PerSample => (0..n)
                .map(|i| descending_order(m.row(i).iter().map(|v| v.abs() as f64)))
                .collect(),
            MaskMode::Global => {
                let mut mean = vec![0.0f64; d];
                for i in 0..n {
                    for (acc, v) in mean.iter_mut().zip(m.row(i)) {
                        *acc += v.abs() as f64;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= n.max(1) as f64);
                vec![descending_order(mean.into_iter())]
            }
        };
        Self { d, mode, orders }
    }

    fn order(&self, row: usize) -> &[u32] {
        match self.mode {
            MaskMode::PerSample => &self.orders[row],
            MaskMode::Global => &self.orders[0],
        }
    }

    pub fn mask(&self, n: usize, fraction: f64) -> Result<FeatureMask> {
        check_fraction(fraction)?;
        let k = keep_count(fraction, self.d);
        let mut keep = vec![false; n * self.d];
        for i in 0..n {
            for &j in &self.order(i)[..k] {
                keep[i * self.d + j as usize] = true;
            }
        }
        Ok(FeatureMask { rows: n, cols: self.d, keep })
    }

    /// Zero the features of `x` (whose row `r` is dataset row `rows[r]`) not
    /// among the top `fraction`.
    pub fn apply(&self, x: &mut DMatrix<f64>, rows: &[usize], fraction: f64) -> Result<()> {
        check_fraction(fraction)?;
        let k = keep_count(fraction, self.d);
        if k == self.d {
            return Ok(());
        }
        for (r, &row) in rows.iter().enumerate() {
            for &j in &self.order(row)[k..] {
                x[(r, j as usize)] = 0.0;
            }
        }
        Ok(())
    }
}

/// Binary keep-mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMask {
    pub rows: usize,
    pub cols: usize,
    pub keep: Vec<bool>,
}

impl FeatureMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.keep[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_subset_of(&self, other: &FeatureMask) -> bool {
        self.keep.iter().zip(&other.keep).all(|(a, b)| !a || *b)
    }
}

pub fn keep_top_fraction_mask(
    importance: &ImportanceMatrix,
    fraction: f64,
    mode: MaskMode,
) -> Result<FeatureMask> {
    FeatureRanking::new(importance, mode).mask(importance.n(), fraction)
}

/// Uniform random scores: masks drawn from it keep random features.
pub fn random_importance(ids: &[String], d: usize, seed: u64) -> Result<ImportanceMatrix> {
    let mut rng = rng_from_seed(seed);
    let data = (0..ids.len() * d).map(|_| rng.random::<f32>()).collect();
    ImportanceMatrix::new(ids.to_vec(), d, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    RemoveAndTest,
    RemoveAndRetrain,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskingCurve {
    pub kind: CurveKind,
    pub mode: MaskMode,
    pub subset: Option<String>,
    pub fractions: Vec<f64>,
    pub metrics: Vec<RepeatedMetrics>,
    pub baseline: RepeatedMetrics,
}

impl MaskingCurve {
    /// Smallest keep-fraction whose r2 reaches `ratio` times the baseline r2.
    /// Undefined (`None`) when the baseline r2 is not positive.
    pub fn min_fraction_reaching(&self, ratio: f64) -> Option<f64> {
        if !(self.baseline.r2 > 0.0) {
            return None;
        }
        let target = ratio * self.baseline.r2;
        self.fractions
            .iter()
            .zip(&self.metrics)
            .find(|(_, m)| m.r2 >= target)
            .map(|(&f, _)| f)
    }

    pub fn csv_header() -> &'static str {
        "fraction,r2,spearman,mode,subset\n"
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        let subset = self.subset.as_deref().unwrap_or("all");
        for (f, m) in self.fractions.iter().zip(&self.metrics) {
            writeln!(out, "{f},{},{},{},{subset}", m.r2, m.spearman, self.mode).unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}{}", Self::csv_header(), self.csv_rows())
    }
}

fn check_importance(dataset: &AlignedDataset, importance: &ImportanceMatrix) -> Result<()> {
    if importance.ids() != dataset.ids() {
        return Err(Error::Shape(
            "importance rows must match the dataset ids and order (align them first)".into(),
        ));
    }
    if importance.d() != dataset.d() {
        return Err(Error::Dimension {
            expected: dataset.d(),
            found: importance.d(),
            context: "importance feature count".into(),
        });
    }
    Ok(())
}

const MASK_STREAM: u64 = domain::MASK;

fn mean_metrics(per_seed: Vec<ProbeMetrics>, runs: &[ProbeRun]) -> RepeatedMetrics {
    let k = per_seed.len() as f64;
    RepeatedMetrics {
        r2: per_seed.iter().map(|m| m.r2).sum::<f64>() / k,
        spearman: per_seed.iter().map(|m| m.spearman).sum::<f64>() / k,
        per_seed,
        lambdas: runs.iter().map(|r| r.probe.lambda).collect(),
        seeds: runs.iter().map(|r| r.probe.seed).collect(),
    }
}

/// Frozen probes from `runs`, each scored on its own `eval_rows` after masking.
fn frozen_curve(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    runs: &[ProbeRun],
    eval_rows: &[Vec<usize>],
    ranking: &FeatureRanking,
    fractions: &[f64],
) -> Result<(RepeatedMetrics, Vec<RepeatedMetrics>)> {
    let score = |fraction: Option<f64>| -> Result<RepeatedMetrics> {
        let per_seed = runs
            .iter()
            .zip(eval_rows)
            .map(|(run, rows)| {
                let mut xt = x.select_rows(rows);
                if let Some(f) = fraction {
                    ranking.apply(&mut xt, rows, f)?;
                }
                evaluate(&run.probe, &xt, &y.select_rows(rows))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_metrics(per_seed, runs))
    };
    let baseline = score(None)?;
    let metrics = fractions
        .par_iter()
        .map(|&f| score(Some(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok((baseline, metrics))
}

/// Train on unmasked data, then score the frozen probes on masked test rows.
pub fn remove_and_test(
    dataset: &AlignedDataset,
    importance: &ImportanceMatrix,
    fractions: &[f64],
    mode: MaskMode,
    protocol: &ProtocolConfig,
) -> Result<MaskingCurve> {
    check_importance(dataset, importance)?;
    validate_fractions(fractions)?;
    let x = dataset.features();
    let y = dataset.target_matrix();
    let runs = repeated_runs(&x, &y, protocol, MASK_STREAM)?;
    let eval_rows: Vec<Vec<usize>> = runs.iter().map(|r| r.split.test.clone()).collect();
    let ranking = FeatureRanking::new(importance, mode);
    let (baseline, metrics) = frozen_curve(&x, &y, &runs, &eval_rows, &ranking, fractions)?;
    Ok(MaskingCurve {
        kind: CurveKind::RemoveAndTest,
        mode,
        subset: None,
        fractions: fractions.to_vec(),
        metrics,
        baseline,
    })
}

/// Mask every row, retrain with the protocol's splits and score.
pub fn remove_and_retrain(
    dataset: &AlignedDataset,
    importance: &ImportanceMatrix,
    fractions: &[f64],
    mode: MaskMode,
    protocol: &ProtocolConfig,
) -> Result<MaskingCurve> {
    check_importance(dataset, importance)?;
    validate_fractions(fractions)?;
    let x = dataset.features();
    let y = dataset.target_matrix();
    let rows: Vec<usize> = (0..dataset.n()).collect();
    let ranking = FeatureRanking::new(importance, mode);
    let baseline = train_probe_repeated(&x, &y, protocol, MASK_STREAM)?;
    let metrics = fractions
        .par_iter()
        .map(|&f| {
            let mut xm = x.clone();
            ranking.apply(&mut xm, &rows, f)?;
            train_probe_repeated(&xm, &y, protocol, MASK_STREAM)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskingCurve {
        kind: CurveKind::RemoveAndRetrain,
        mode,
        subset: None,
        fractions: fractions.to_vec(),
        metrics,
        baseline,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetStrategy {
    /// Probes trained on the full dataset, scored on each subset's test rows.
    #[default]
    Frozen,
    /// Remove-and-retrain inside each subset.
    Retrain,
}

impl FromStr for SubsetStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(SubsetStrategy::Frozen),
            "retrain" => Ok(SubsetStrategy::Retrain),
            other => Err(Error::InvalidArgument(format!(
                "unknown subset strategy {other:?} (expected frozen or retrain)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetComparison {
    pub strategy: SubsetStrategy,
    pub subset_size: usize,
    pub low: MaskingCurve,
    pub mid: MaskingCurve,
    pub high: MaskingCurve,
}

impl SubsetComparison {
    pub fn curves(&self) -> [&MaskingCurve; 3] {
        [&self.low, &self.mid, &self.high]
    }

    pub fn to_csv(&self) -> String {
        let mut out = MaskingCurve::csv_header().to_owned();
        for c in self.curves() {
            out.push_str(&c.csv_rows());
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
pub fn subset_masking_comparison(
    dataset: &AlignedDataset,
    scores: &UncertaintyVector,
    importance: &ImportanceMatrix,
    subset_size: usize,
    fractions: &[f64],
    mode: MaskMode,
    protocol: &ProtocolConfig,
    strategy: SubsetStrategy,
) -> Result<SubsetComparison> {
    check_importance(dataset, importance)?;
    validate_fractions(fractions)?;
    let ranking = sort_desc_by_uncertainty(scores);
    let subsets = quantile_subsets(&ranking, subset_size)?;
    let index = dataset.id_index();
    let rows_of = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("scored id {id:?} is not in the dataset"))
                })
            })
            .collect()
    };

    let mut curves = Vec::with_capacity(3);
    match strategy {
        SubsetStrategy::Frozen => {
            let x = dataset.features();
            let y = dataset.target_matrix();
            let runs = repeated_runs(&x, &y, protocol, MASK_STREAM)?;
            let features = FeatureRanking::new(importance, mode);
            for (name, subset) in subsets.iter() {
                let members: HashSet<usize> = rows_of(&subset.ids)?.into_iter().collect();
                let eval_rows: Vec<Vec<usize>> = runs
                    .iter()
                    .map(|r| r.split.test.iter().copied().filter(|i| members.contains(i)).collect())
                    .collect();
                if let Some(short) = eval_rows.iter().find(|r| r.len() < 2) {
                    return Err(Error::InsufficientSamples {
                        need: 2,
                        got: short.len(),
                        context: format!("{name} subset rows in a test split"),
                    });
                }
                let (baseline, metrics) = frozen_curve(&x, &y, &runs, &eval_rows, &features, fractions)?;
                curves.push(MaskingCurve {
                    kind: CurveKind::RemoveAndTest,
                    mode,
                    subset: Some(name.to_owned()),
                    fractions: fractions.to_vec(),
                    metrics,
                    baseline,
                });
            }
        }
        SubsetStrategy::Retrain => {
            for (name, subset) in subsets.iter() {
                let sub = dataset.subset(&rows_of(&subset.ids)?);
                let imp = sub.importance.clone().unwrap_or(ImportanceMatrix {
                    matrix: importance.matrix.select_rows(&rows_of(&subset.ids)?),
                });
                let mut curve = remove_and_retrain(&sub, &imp, fractions, mode, protocol)?;
                curve.subset = Some(name.to_owned());
                curves.push(curve);
            }
        }
    }
    let high = curves.pop().unwrap();
    let mid = curves.pop().unwrap();
    let low = curves.pop().unwrap();
    Ok(SubsetComparison {
        strategy,
        subset_size,
        low,
        mid,
        high,
    })
}
