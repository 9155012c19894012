//! The segment experiment: sort by uncertainty, cut into sliding windows,
//! train a probe per window and correlate window uncertainty with probe
//! quality.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{kendall_tau, pearson_r, spearman_rho};
use crate::data::AlignedDataset;
use crate::error::{Error, Result};
use crate::probe::{train_probe_repeated, ProtocolConfig};
use crate::rng::RNG_ALGORITHM;
use crate::segmentation::{sliding_windows, sort_desc_by_uncertainty, take_top_uncertain};
use crate::uncertainty::{Estimator, UncertaintyVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub window: usize,
    pub stride: usize,
    pub top_k: Option<usize>,
    pub protocol: ProtocolConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentRow {
    pub segment_index: usize,
    pub start: usize,
    pub end: usize,
    pub mean_uncertainty: f64,
    /// `None` when the probe metrics were degenerate.
    pub r2: Option<f64>,
    pub spearman: Option<f64>,
    pub per_seed_r2: Vec<f64>,
    pub per_seed_spearman: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl SegmentRow {
    pub fn is_degenerate(&self) -> bool {
        self.r2.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coefficients {
    pub kendall: Option<f64>,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
}

impl Coefficients {
    pub fn between(a: &[f64], b: &[f64]) -> Self {
        Self {
            kendall: kendall_tau(a, b).ok(),
            spearman: spearman_rho(a, b).ok(),
            pearson: pearson_r(a, b).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub uncertainty_vs_r2: Coefficients,
    pub uncertainty_vs_spearman: Coefficients,
    pub segments_used: usize,
    pub degenerate_segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    pub window: usize,
    pub stride: usize,
    pub top_k: Option<usize>,
    pub estimator: Estimator,
    pub protocol: ProtocolConfig,
    pub n_scored: usize,
    pub n_used: usize,
    pub rng: &'static str,
    pub version: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ReportConfig,
    pub rows: Vec<SegmentRow>,
    /// Absent when fewer than two usable segments remain.
    pub summary: Option<Summary>,
    pub warnings: Vec<String>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    /// Plot-ready per-segment rows; per-seed values are `;`-separated.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from(
            "segment_index,start,end,mean_uncertainty,r2,spearman,degenerate,per_seed_r2,per_seed_spearman,lambdas\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.segment_index,
                r.start,
                r.end,
                r.mean_uncertainty,
                opt(r.r2),
                opt(r.spearman),
                r.is_degenerate(),
                join(&r.per_seed_r2),
                join(&r.per_seed_spearman),
                join(&r.lambdas),
            )
            .unwrap();
        }
        out
    }

    /// Config echo, coefficient table and warnings (rows omitted).
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            config: &'a ReportConfig,
            summary: &'a Option<Summary>,
            n_segments: usize,
            warnings: &'a [String],
        }
        Ok(serde_json::to_string_pretty(&View {
            config: &self.config,
            summary: &self.summary,
            n_segments: self.rows.len(),
            warnings: &self.warnings,
        })?)
    }
}

pub fn run_segment_experiment(
    dataset: &AlignedDataset,
    scores: &UncertaintyVector,
    config: &SegmentConfig,
) -> Result<ExperimentReport> {
    config.protocol.validate()?;
    let index = dataset.id_index();
    let mut ranking = sort_desc_by_uncertainty(scores);
    if let Some(k) = config.top_k {
        ranking = take_top_uncertain(&ranking, k)?;
    }
    let rows_of: Vec<usize> = ranking
        .ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("scored id {id:?} is not in the dataset")))
        })
        .collect::<Result<_>>()?;
    let spec = sliding_windows(ranking.len(), config.window, config.stride)?;

    let x_all = dataset.features_rows(&rows_of);
    let y_all = dataset.target_rows(&rows_of);

    let rows: Vec<SegmentRow> = spec
        .spans
        .par_iter()
        .enumerate()
        .map(|(k, span)| -> Result<SegmentRow> {
            let x = x_all.rows(span.start, span.len()).into_owned();
            let y = y_all.rows(span.start, span.len()).into_owned();
            let mut row = SegmentRow {
                segment_index: k,
                start: span.start,
                end: span.end,
                mean_uncertainty: ranking.mean_score(span.clone()),
                r2: None,
                spearman: None,
                per_seed_r2: Vec::new(),
                per_seed_spearman: Vec::new(),
                lambdas: Vec::new(),
            };
            match train_probe_repeated(&x, &y, &config.protocol, k as u64) {
                Ok(m) => {
                    row.r2 = Some(m.r2);
                    row.spearman = Some(m.spearman);
                    row.per_seed_r2 = m.per_seed.iter().map(|p| p.r2).collect();
                    row.per_seed_spearman = m.per_seed.iter().map(|p| p.spearman).collect();
                    row.lambdas = m.lambdas;
                }
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    let used: Vec<&SegmentRow> = rows.iter().filter(|r| !r.is_degenerate()).collect();
    let degenerate = rows.len() - used.len();
    if degenerate > 0 {
        warnings.push(format!("{degenerate} segment(s) had degenerate probe metrics and were excluded from the summary"));
    }
    let summary = if used.len() < 2 {
        warnings.push(format!(
            "{} usable segment(s); at least 2 are needed for summary coefficients",
            used.len()
        ));
        None
    } else {
        let u: Vec<f64> = used.iter().map(|r| r.mean_uncertainty).collect();
        let r2: Vec<f64> = used.iter().map(|r| r.r2.unwrap()).collect();
        let sp: Vec<f64> = used.iter().map(|r| r.spearman.unwrap()).collect();
        Some(Summary {
            uncertainty_vs_r2: Coefficients::between(&u, &r2),
            uncertainty_vs_spearman: Coefficients::between(&u, &sp),
            segments_used: used.len(),
            degenerate_segments: degenerate,
        })
    };

    Ok(ExperimentReport {
        config: ReportConfig {
            window: config.window,
            stride: config.stride,
            top_k: config.top_k,
            estimator: scores.estimator,
            protocol: config.protocol.clone(),
            n_scored: scores.len(),
            n_used: ranking.len(),
            rng: RNG_ALGORITHM,
            version: crate::VERSION,
        },
        rows,
        summary,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{align, EmbeddingMatrix, ResponseTable, TargetVector};
    use crate::rng::rng_from_seed;
    use crate::uncertainty::score_dataset;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Linear data whose target noise grows with the response spread.
    fn graded(n: usize, d: usize, seed: u64) -> AlignedDataset {
        let mut rng = rng_from_seed(seed);
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:04}")).collect();
        let data: Vec<f32> = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        let emb = EmbeddingMatrix::new(ids.clone(), d, data).unwrap();
        let mut resp = ResponseTable::new(1);
        let mut tgt = TargetVector::new(1);
        for (i, id) in ids.iter().enumerate() {
            let sigma = 0.05 + 3.0 * (i % 10) as f64 / 10.0;
            let belief: f64 = emb.matrix.row(i).iter().map(|&v| v as f64).sum();
            let noise: f64 = rng.sample(StandardNormal);
            tgt.insert(id.clone(), vec![belief + sigma * noise]).unwrap();
            let rs = (0..10)
                .map(|_| vec![belief + sigma * rng.sample::<f64, _>(StandardNormal)])
                .collect();
            resp.insert(id.clone(), rs).unwrap();
        }
        align(&emb, &resp, &tgt, None).unwrap()
    }

    fn config(window: usize, stride: usize) -> SegmentConfig {
        SegmentConfig {
            window,
            stride,
            top_k: None,
            protocol: ProtocolConfig {
                n_seeds: 2,
                ..ProtocolConfig::default()
            },
        }
    }

    #[test]
    fn graded_noise_gives_negative_correlation() {
        let ds = graded(600, 4, 1);
        let scores = score_dataset(&ds, Estimator::Variance, 2).unwrap();
        let report = run_segment_experiment(&ds, &scores, &config(100, 50)).unwrap();
        assert_eq!(report.rows.len(), 11);
        let s = report.summary.unwrap();
        assert!(s.uncertainty_vs_r2.spearman.unwrap() < -0.8);
        assert!(report
            .rows
            .windows(2)
            .all(|w| w[0].mean_uncertainty >= w[1].mean_uncertainty));
    }

    #[test]
    fn single_segment_warns_without_summary() {
        let ds = graded(100, 3, 2);
        let scores = score_dataset(&ds, Estimator::Variance, 2).unwrap();
        let report = run_segment_experiment(&ds, &scores, &config(100, 10)).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.summary.is_none());
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn window_larger_than_n_is_rejected() {
        let ds = graded(50, 3, 3);
        let scores = score_dataset(&ds, Estimator::Variance, 2).unwrap();
        let err = run_segment_experiment(&ds, &scores, &config(60, 10)).unwrap_err();
        assert!(err.to_string().contains("window (60)"));
    }

    #[test]
    fn top_k_restricts_and_echoes() {
        let ds = graded(300, 3, 4);
        let scores = score_dataset(&ds, Estimator::Variance, 2).unwrap();
        let mut cfg = config(100, 50);
        cfg.top_k = Some(200);
        let report = run_segment_experiment(&ds, &scores, &cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.config.n_used, 200);
        assert!(report.summary_json().unwrap().contains("\"top_k\": 200"));
    }

    #[test]
    fn degenerate_segments_are_excluded() {
        // constant targets in the least uncertain half
        let mut ds = graded(400, 3, 5);
        let scores = score_dataset(&ds, Estimator::Variance, 2).unwrap();
        let ranking = sort_desc_by_uncertainty(&scores);
        let mut tgt = TargetVector::new(1);
        for (rank, id) in ranking.ids.iter().enumerate() {
            let v = if rank >= 200 { 1.0 } else { ds.targets.get(id).unwrap()[0] };
            tgt.insert(id.clone(), vec![v]).unwrap();
        }
        ds = align(&ds.embeddings, &ds.responses, &tgt, None).unwrap();
        let report = run_segment_experiment(&ds, &scores, &config(100, 100)).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.rows[2].is_degenerate() && report.rows[3].is_degenerate());
        let s = report.summary.unwrap();
        assert_eq!(s.degenerate_segments, 2);
        assert_eq!(s.segments_used, 2);
    }
}
