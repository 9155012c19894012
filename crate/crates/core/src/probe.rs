//! Ridge probes: closed-form fitting, the split/tune/average protocol, and
//! the R² and Spearman evaluation metrics.
//!
//! Fitting centres features and targets, solves
//! `(XcᵀXc + λI) W = XcᵀYc` by Cholesky and leaves the intercept
//! unpenalised. When there are more features than rows the equivalent dual
//! system `(XcXcᵀ + λI) A = Yc`, `W = XcᵀA` is solved instead.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::spearman_rho;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, domain, rng_from_seed};

pub const PROBE_MAGIC: [u8; 4] = *b"PRB1";

/// Relative pivot size below which a `lambda = 0` fit is declared rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeProbe {
    /// d×t
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub lambda: f64,
    pub feature_means: DVector<f64>,
    pub target_means: DVector<f64>,
    pub seed: u64,
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn center(m: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    out
}

/// Centred design with its Gram matrix, reusable across many `lambda`s.
struct RidgeSystem {
    xc: DMatrix<f64>,
    yc: DMatrix<f64>,
    x_means: DVector<f64>,
    y_means: DVector<f64>,
    dual: bool,
    gram: DMatrix<f64>,
    /// XcᵀYc (primal only)
    xty: DMatrix<f64>,
}

impl RidgeSystem {
    fn new(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Shape(format!(
                "X has {} rows but Y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() < 2 {
            return Err(Error::InsufficientSamples {
                need: 2,
                got: x.nrows(),
                context: "ridge fit".into(),
            });
        }
        if x.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::Shape("X and Y need at least one column".into()));
        }
        let x_means = column_means(x);
        let y_means = column_means(y);
        let xc = center(x, &x_means);
        let yc = center(y, &y_means);
        let dual = x.ncols() > x.nrows();
        let (gram, xty) = if dual {
            (&xc * xc.transpose(), DMatrix::zeros(0, 0))
        } else {
            (xc.tr_mul(&xc), xc.tr_mul(&yc))
        };
        Ok(Self {
            xc,
            yc,
            x_means,
            y_means,
            dual,
            gram,
            xty,
        })
    }

    fn solve(&self, lambda: f64) -> Result<DMatrix<f64>> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        if lambda == 0.0 && self.dual {
            return Err(Error::RankDeficient);
        }
        let mut a = self.gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        let scale = (0..a.nrows()).map(|i| a[(i, i)]).fold(0.0, f64::max);
        let chol = a.cholesky().ok_or(if lambda == 0.0 {
            Error::RankDeficient
        } else {
            Error::Degenerate("ridge system is not positive definite".into())
        })?;
        if lambda == 0.0 {
            let l = chol.l_dirty();
            let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            if !(min_pivot > RANK_TOL * scale) {
                return Err(Error::RankDeficient);
            }
        }
        if self.dual {
            let alpha = chol.solve(&self.yc);
            Ok(self.xc.tr_mul(&alpha))
        } else {
            Ok(chol.solve(&self.xty))
        }
    }

    fn probe(&self, weights: DMatrix<f64>, lambda: f64, seed: u64) -> RidgeProbe {
        let intercept = &self.y_means - weights.tr_mul(&self.x_means);
        RidgeProbe {
            weights,
            intercept,
            lambda,
            feature_means: self.x_means.clone(),
            target_means: self.y_means.clone(),
            seed,
        }
    }
}

/// Fit a ridge probe with an unpenalised intercept.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RidgeProbe> {
    let system = RidgeSystem::new(x, y)?;
    let w = system.solve(lambda)?;
    Ok(system.probe(w, lambda, 0))
}

pub fn predict(probe: &RidgeProbe, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != probe.weights.nrows() {
        return Err(Error::Shape(format!(
            "probe expects {} features, got {}",
            probe.weights.nrows(),
            x.ncols()
        )));
    }
    let mut out = center(x, &probe.feature_means) * &probe.weights;
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(probe.target_means[j]);
    }
    Ok(out)
}

/// Centred ridge objective `‖Yc − XcW‖² + λ‖W‖²` evaluated at `w`.
pub fn ridge_objective(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64) -> f64 {
    let xc = center(x, &column_means(x));
    let yc = center(y, &column_means(y));
    (yc - xc * w).norm_squared() + lambda * w.norm_squared()
}

impl RidgeProbe {
    /// Binary layout: `PRB1 | u32 d | u32 t | u32 meta_len | meta JSON |
    /// d*t f64 weights (row-major) | d f64 feature means`, little-endian.
    /// The JSON record carries lambda, seed, intercept, target means and any
    /// caller-supplied metrics.
    pub fn to_bytes(&self, metrics: Option<&ProbeMetrics>) -> Result<Vec<u8>> {
        let meta = ProbeRecord {
            lambda: self.lambda,
            seed: self.seed,
            intercept: self.intercept.iter().copied().collect(),
            target_means: self.target_means.iter().copied().collect(),
            metrics: metrics.cloned(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let (d, t) = self.weights.shape();
        let mut out = Vec::with_capacity(16 + meta.len() + 8 * (d * t + d));
        out.extend_from_slice(&PROBE_MAGIC);
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for i in 0..d {
            for j in 0..t {
                out.extend_from_slice(&self.weights[(i, j)].to_le_bytes());
            }
        }
        for v in self.feature_means.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<ProbeMetrics>)> {
        if bytes.len() < 16 {
            return Err(Error::Truncated("probe header".into()));
        }
        if bytes[..4] != PROBE_MAGIC {
            return Err(Error::BadMagic {
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
                expected: "PRB1".into(),
            });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (d, t, meta_len) = (word(4), word(8), word(12));
        let expected = 16 + meta_len + 8 * (d * t + d);
        if bytes.len() != expected {
            return Err(Error::Truncated(format!(
                "probe needs {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let meta: ProbeRecord = serde_json::from_slice(&bytes[16..16 + meta_len])
            .map_err(|e| Error::Format(format!("probe metadata: {e}")))?;
        if meta.intercept.len() != t || meta.target_means.len() != t {
            return Err(Error::Format("probe metadata dimensions disagree".into()));
        }
        let floats: Vec<f64> = bytes[16 + meta_len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let weights = DMatrix::from_row_slice(d, t, &floats[..d * t]);
        let feature_means = DVector::from_column_slice(&floats[d * t..]);
        Ok((
            RidgeProbe {
                weights,
                intercept: DVector::from_vec(meta.intercept),
                lambda: meta.lambda,
                feature_means,
                target_means: DVector::from_vec(meta.target_means),
                seed: meta.seed,
            },
            meta.metrics,
        ))
    }

    pub fn write(&self, path: impl AsRef<Path>, metrics: Option<&ProbeMetrics>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(metrics)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeRecord {
    lambda: f64,
    seed: u64,
    intercept: Vec<f64>,
    target_means: Vec<f64>,
    metrics: Option<ProbeMetrics>,
}

/// A metric averaged uniformly over outputs; degenerate outputs are `None`
/// and left out of the average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub value: f64,
    pub per_output: Vec<Option<f64>>,
}

fn check_eval_shapes(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Shape(format!(
            "targets {:?} vs predictions {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    if y.nrows() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: y.nrows(),
            context: "metric evaluation".into(),
        });
    }
    Ok(())
}

fn average_outputs(name: &str, per_output: Vec<Option<f64>>) -> Result<MetricScore> {
    let valid: Vec<f64> = per_output.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Degenerate(format!("{name}: every output is degenerate")));
    }
    Ok(MetricScore {
        value: valid.iter().sum::<f64>() / valid.len() as f64,
        per_output,
    })
}

/// Coefficient of determination per output, about the evaluation-set mean.
pub fn r2_score(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<MetricScore> {
    check_eval_shapes(y, y_hat)?;
    let per_output = y
        .column_iter()
        .zip(y_hat.column_iter())
        .map(|(col, pred)| {
            let mean = col.mean();
            let ss_tot: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            let ss_res: f64 = col.iter().zip(pred.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot)
        })
        .collect();
    average_outputs("r2", per_output)
}

/// Spearman rank correlation per output (average ranks for ties).
pub fn spearman_metric(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<MetricScore> {
    check_eval_shapes(y, y_hat)?;
    let per_output = y
        .column_iter()
        .zip(y_hat.column_iter())
        .map(|(col, pred)| {
            let a: Vec<f64> = col.iter().copied().collect();
            let b: Vec<f64> = pred.iter().copied().collect();
            spearman_rho(&a, &b).ok()
        })
        .collect();
    average_outputs("spearman", per_output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub r2: f64,
    pub spearman: f64,
    pub n_test: usize,
    pub per_output_r2: Vec<Option<f64>>,
    pub per_output_spearman: Vec<Option<f64>>,
}

pub fn evaluate(probe: &RidgeProbe, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<ProbeMetrics> {
    let y_hat = predict(probe, x)?;
    let r2 = r2_score(y, &y_hat)?;
    let sp = spearman_metric(y, &y_hat)?;
    Ok(ProbeMetrics {
        r2: r2.value,
        spearman: sp.value,
        n_test: y.nrows(),
        per_output_r2: r2.per_output,
        per_output_spearman: sp.per_output,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub test_fraction: f64,
    /// Share of the training split held out for choosing lambda.
    pub inner_val_fraction: f64,
    pub lambda_grid: Vec<f64>,
    pub n_seeds: usize,
    pub master_seed: u64,
}

pub fn default_lambda_grid() -> Vec<f64> {
    (-4..=4).map(|e| 10f64.powi(e)).collect()
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            inner_val_fraction: 0.25,
            lambda_grid: default_lambda_grid(),
            n_seeds: 5,
            master_seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("test_fraction", self.test_fraction),
            ("inner_val_fraction", self.inner_val_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must be in (0, 1), got {f}")));
            }
        }
        if self.lambda_grid.is_empty() {
            return Err(Error::InvalidArgument("lambda grid is empty".into()));
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "lambda grid values must be positive, got {l}"
            )));
        }
        if self.n_seeds == 0 {
            return Err(Error::InvalidArgument("n_seeds must be at least 1".into()));
        }
        Ok(())
    }

    /// Seed for repetition `seed_index` of job `stream` (e.g. a segment index).
    pub fn seed_for(&self, stream: u64, seed_index: u64) -> u64 {
        derive_seed(self.master_seed, &[domain::PROBE, stream, seed_index])
    }

    fn sorted_grid(&self) -> Vec<f64> {
        let mut g = self.lambda_grid.clone();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    }
}

/// Index split of one protocol repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub fit: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn train(&self) -> Vec<usize> {
        let mut t = self.validation.clone();
        t.extend_from_slice(&self.fit);
        t
    }
}

pub fn split_indices(n: usize, protocol: &ProtocolConfig, seed: u64) -> Result<Split> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let n_test = (n as f64 * protocol.test_fraction).round() as usize;
    let n_train = n.saturating_sub(n_test);
    let n_val = (n_train as f64 * protocol.inner_val_fraction).round() as usize;
    let n_fit = n_train.saturating_sub(n_val);
    if n_test < 2 || n_val < 2 || n_fit < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: n_test.min(n_val).min(n_fit),
            context: format!(
                "{n} samples give fit/validation/test sizes {n_fit}/{n_val}/{n_test}"
            ),
        });
    }
    Ok(Split {
        test: perm[..n_test].to_vec(),
        validation: perm[n_test..n_test + n_val].to_vec(),
        fit: perm[n_test + n_val..].to_vec(),
    })
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx)
}

/// Result of one split/tune/refit/evaluate repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRun {
    pub probe: RidgeProbe,
    pub metrics: ProbeMetrics,
    pub split: Split,
    /// Validation MSE per lambda, ascending lambda.
    pub validation_curve: Vec<(f64, f64)>,
}

/// Choose lambda on the inner split, refit on the full training split and
/// score on the test split.
pub fn train_eval_once(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    protocol: &ProtocolConfig,
    seed: u64,
) -> Result<ProbeRun> {
    protocol.validate()?;
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "X has {} rows but Y has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let split = split_indices(x.nrows(), protocol, seed)?;

    let inner = RidgeSystem::new(&rows(x, &split.fit), &rows(y, &split.fit))?;
    let x_val = rows(x, &split.validation);
    let y_val = rows(y, &split.validation);
    let mut curve = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for lambda in protocol.sorted_grid() {
        let probe = inner.probe(inner.solve(lambda)?, lambda, seed);
        let mse = (predict(&probe, &x_val)? - &y_val).norm_squared() / y_val.len() as f64;
        curve.push((lambda, mse));
        if best.is_none_or(|(_, m)| mse < m) {
            best = Some((lambda, mse));
        }
    }
    let (lambda, _) = best.expect("grid is nonempty");

    let train = split.train();
    let full = RidgeSystem::new(&rows(x, &train), &rows(y, &train))?;
    let probe = full.probe(full.solve(lambda)?, lambda, seed);
    let metrics = evaluate(&probe, &rows(x, &split.test), &rows(y, &split.test))?;
    Ok(ProbeRun {
        probe,
        metrics,
        split,
        validation_curve: curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedMetrics {
    pub r2: f64,
    pub spearman: f64,
    pub per_seed: Vec<ProbeMetrics>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl RepeatedMetrics {
    pub fn from_runs(runs: &[ProbeRun]) -> Self {
        let k = runs.len() as f64;
        RepeatedMetrics {
            r2: runs.iter().map(|r| r.metrics.r2).sum::<f64>() / k,
            spearman: runs.iter().map(|r| r.metrics.spearman).sum::<f64>() / k,
            per_seed: runs.iter().map(|r| r.metrics.clone()).collect(),
            lambdas: runs.iter().map(|r| r.probe.lambda).collect(),
            seeds: runs.iter().map(|r| r.probe.seed).collect(),
        }
    }
}

/// All `n_seeds` repetitions for job `stream`, in seed order.
pub fn repeated_runs(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    protocol: &ProtocolConfig,
    stream: u64,
) -> Result<Vec<ProbeRun>> {
    protocol.validate()?;
    (0..protocol.n_seeds as u64)
        .into_par_iter()
        .map(|k| train_eval_once(x, y, protocol, protocol.seed_for(stream, k)))
        .collect()
}

/// Mean metrics over `n_seeds` random splits.
pub fn train_probe_repeated(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    protocol: &ProtocolConfig,
    stream: u64,
) -> Result<RepeatedMetrics> {
    Ok(RepeatedMetrics::from_runs(&repeated_runs(x, y, protocol, stream)?))
}
