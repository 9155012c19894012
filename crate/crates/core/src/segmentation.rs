//! Uncertainty-descending ordering, sliding windows and quantile subsets.

use std::fmt::Write as _;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::uncertainty::{csv_field, UncertaintyVector};

/// Ids with their scores, most uncertain first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slice(&self, span: Range<usize>) -> Ranking {
        Ranking {
            ids: self.ids[span.clone()].to_vec(),
            scores: self.scores[span].to_vec(),
        }
    }

    pub fn mean_score(&self, span: Range<usize>) -> f64 {
        let len = span.len() as f64;
        self.scores[span].iter().sum::<f64>() / len
    }
}

/// Scores descending; equal scores ordered by id ascending.
pub fn sort_desc_by_uncertainty(scores: &UncertaintyVector) -> Ranking {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then_with(|| scores.ids[a].cmp(&scores.ids[b]))
    });
    Ranking {
        ids: order.iter().map(|&i| scores.ids[i].clone()).collect(),
        scores: order.iter().map(|&i| scores.scores[i]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSpec {
    pub window: usize,
    pub stride: usize,
    pub spans: Vec<Range<usize>>,
}

impl SegmentSpec {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// `segment_index,start,end,mean_uncertainty` rows over `ranking`.
    pub fn to_csv(&self, ranking: &Ranking) -> String {
        let mut out = String::from("segment_index,start,end,mean_uncertainty\n");
        for (k, span) in self.spans.iter().enumerate() {
            writeln!(
                out,
                "{k},{},{},{}",
                span.start,
                span.end,
                ranking.mean_score(span.clone())
            )
            .unwrap();
        }
        out
    }
}

/// Windows `[k*stride, k*stride + window)` that fit inside `n`; a partial tail
/// is dropped.
pub fn sliding_windows(n: usize, window: usize, stride: usize) -> Result<SegmentSpec> {
    if stride < 1 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    if window > n {
        return Err(Error::InvalidArgument(format!(
            "window ({window}) must not exceed the number of samples ({n})"
        )));
    }
    let spans = (0..)
        .map(|k| k * stride)
        .take_while(|start| start + window <= n)
        .map(|start| start..start + window)
        .collect();
    Ok(SegmentSpec {
        window,
        stride,
        spans,
    })
}

pub fn take_top_uncertain(ranking: &Ranking, k: usize) -> Result<Ranking> {
    if k == 0 || k > ranking.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k ({k}) must be in 1..={}",
            ranking.len()
        )));
    }
    Ok(ranking.slice(0..k))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileSubsets {
    pub low: Ranking,
    pub mid: Ranking,
    pub high: Ranking,
}

impl QuantileSubsets {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Ranking)> {
        [("low", &self.low), ("mid", &self.mid), ("high", &self.high)].into_iter()
    }
}

/// High = the `size` most uncertain, low = the `size` least, mid = `size`
/// ranks centred on the median rank.
pub fn quantile_subsets(ranking: &Ranking, size: usize) -> Result<QuantileSubsets> {
    let n = ranking.len();
    if size == 0 || 3 * size > n {
        return Err(Error::InvalidArgument(format!(
            "subset size {size} needs 3*size <= n = {n}"
        )));
    }
    let mid_start = (n - size) / 2;
    Ok(QuantileSubsets {
        high: ranking.slice(0..size),
        mid: ranking.slice(mid_start..mid_start + size),
        low: ranking.slice(n - size..n),
    })
}

pub fn ranking_csv(ranking: &Ranking) -> String {
    let mut out = String::from("rank,id,score\n");
    for (r, (id, s)) in ranking.ids.iter().zip(&ranking.scores).enumerate() {
        writeln!(out, "{r},{},{s}", csv_field(id)).unwrap();
    }
    out
}
