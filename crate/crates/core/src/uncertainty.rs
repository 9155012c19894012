//! Per-sample response-uncertainty estimators.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AlignedDataset, ResponseTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    #[default]
    Variance,
    Entropy,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Variance => "variance",
            Estimator::Entropy => "entropy",
        }
    }

    pub fn min_responses_floor(self) -> usize {
        match self {
            Estimator::Variance => 2,
            Estimator::Entropy => 1,
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Estimator::Variance),
            "entropy" => Ok(Estimator::Entropy),
            other => Err(Error::InvalidArgument(format!(
                "unknown estimator {other:?} (expected variance or entropy)"
            ))),
        }
    }
}

/// Sum over coordinates of the population variance (divide by `m`).
pub fn variance_uncertainty(responses: &[Vec<f64>]) -> Result<f64> {
    let m = responses.len();
    if m < 2 {
        return Err(Error::InsufficientResponses { need: 2, got: m });
    }
    let t = responses[0].len();
    if let Some(bad) = responses.iter().find(|r| r.len() != t) {
        return Err(Error::Dimension {
            expected: t,
            found: bad.len(),
            context: "responses within one sample".into(),
        });
    }
    // exact zero for identical answers; a rounded mean can leave residue
    if responses.iter().all(|r| r == &responses[0]) {
        return Ok(0.0);
    }
    let total = (0..t)
        .map(|k| {
            let mean = responses.iter().map(|r| r[k]).sum::<f64>() / m as f64;
            responses.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / m as f64
        })
        .sum::<f64>();
    Ok(total)
}

/// Shannon entropy in bits over exact response values.
pub fn entropy_uncertainty(responses: &[Vec<f64>]) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::InsufficientResponses { need: 1, got: 0 });
    }
    if let Some(r) = responses.iter().find(|r| r.len() != 1) {
        return Err(Error::EstimatorNotApplicable {
            estimator: "entropy",
            t: r.len(),
        });
    }
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for r in responses {
        // +0.0 and -0.0 are the same answer
        let v = if r[0] == 0.0 { 0.0 } else { r[0] };
        *counts.entry(v.to_bits()).or_default() += 1;
    }
    if counts.len() == 1 {
        return Ok(0.0);
    }
    let m = responses.len() as f64;
    // sorted so the float sum does not depend on hash order
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    Ok(c.iter()
        .map(|&k| {
            let p = k as f64 / m;
            -p * p.log2()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyVector {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub n_responses: Vec<usize>,
    pub estimator: Estimator,
    /// Samples with fewer valid responses than required.
    pub excluded: Vec<String>,
}

impl UncertaintyVector {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,score,estimator,n_responses\n");
        for ((id, s), m) in self.ids.iter().zip(&self.scores).zip(&self.n_responses) {
            writeln!(out, "{},{},{},{}", csv_field(id), s, self.estimator, m).unwrap();
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn score_responses(
    responses: &ResponseTable,
    estimator: Estimator,
    min_responses: usize,
) -> Result<UncertaintyVector> {
    if min_responses < estimator.min_responses_floor() {
        return Err(Error::InvalidArgument(format!(
            "min_responses must be at least {} for the {estimator} estimator",
            estimator.min_responses_floor()
        )));
    }
    if estimator == Estimator::Entropy && responses.t() != 1 {
        return Err(Error::EstimatorNotApplicable {
            estimator: "entropy",
            t: responses.t(),
        });
    }
    let mut out = UncertaintyVector {
        ids: Vec::new(),
        scores: Vec::new(),
        n_responses: Vec::new(),
        estimator,
        excluded: Vec::new(),
    };
    for (id, rs) in responses.iter() {
        if rs.len() < min_responses {
            out.excluded.push(id.to_owned());
            continue;
        }
        let score = match estimator {
            Estimator::Variance => variance_uncertainty(rs)?,
            Estimator::Entropy => entropy_uncertainty(rs)?,
        };
        out.ids.push(id.to_owned());
        out.scores.push(score);
        out.n_responses.push(rs.len());
    }
    if out.ids.is_empty() {
        return Err(Error::InsufficientSamples {
            need: 1,
            got: 0,
            context: format!("no sample has {min_responses} or more valid responses"),
        });
    }
    Ok(out)
}

/// Score every sample of an aligned dataset, in dataset order.
pub fn score_dataset(
    dataset: &AlignedDataset,
    estimator: Estimator,
    min_responses: usize,
) -> Result<UncertaintyVector> {
    score_responses(&dataset.responses, estimator, min_responses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalars(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn variance_hand_values() {
        assert_eq!(variance_uncertainty(&scalars(&[1799., 1799., 1796.])).unwrap(), 2.0);
        assert_eq!(variance_uncertainty(&scalars(&[1799.; 20])).unwrap(), 0.0);
        let two_d = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(variance_uncertainty(&two_d).unwrap(), 1.0);
    }

    #[test]
    fn variance_needs_two() {
        assert!(matches!(
            variance_uncertainty(&scalars(&[1.0])),
            Err(Error::InsufficientResponses { need: 2, got: 1 })
        ));
    }

    #[test]
    fn entropy_hand_values() {
        assert_eq!(entropy_uncertainty(&scalars(&[1799.; 20])).unwrap(), 0.0);
        let mut half = vec![1799.0; 10];
        half.extend([1796.0; 10]);
        assert_eq!(entropy_uncertainty(&scalars(&half)).unwrap(), 1.0);
        let four: Vec<f64> = (0..20).map(|i| (i % 4) as f64).collect();
        assert_eq!(entropy_uncertainty(&scalars(&four)).unwrap(), 2.0);
    }

    #[test]
    fn entropy_rejects_spatial() {
        let err = entropy_uncertainty(&[vec![1.0, 2.0]]).unwrap_err();
        assert!(matches!(err, Error::EstimatorNotApplicable { t: 2, .. }));
    }

    #[test]
    fn score_excludes_thin_samples() {
        let mut t = ResponseTable::new(1);
        t.insert("a", scalars(&[1.0, 2.0, 3.0])).unwrap();
        t.insert("b", scalars(&[5.0])).unwrap();
        let u = score_responses(&t, Estimator::Variance, 2).unwrap();
        assert_eq!(u.ids, vec!["a"]);
        assert_eq!(u.excluded, vec!["b"]);
        assert!(score_responses(&t, Estimator::Variance, 1).is_err());
        let e = score_responses(&t, Estimator::Entropy, 1).unwrap();
        assert!(e.excluded.is_empty());
        assert_eq!(e.scores[1], 0.0);
    }

    #[test]
    fn score_empty_after_exclusion_is_error() {
        let mut t = ResponseTable::new(1);
        t.insert("a", scalars(&[1.0])).unwrap();
        assert!(score_responses(&t, Estimator::Variance, 2).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut t = ResponseTable::new(1);
        t.insert("washington", scalars(&[1799., 1799., 1796.])).unwrap();
        let u = score_responses(&t, Estimator::Variance, 2).unwrap();
        assert_eq!(
            u.to_csv(),
            "id,score,estimator,n_responses\nwashington,2,variance,3\n"
        );
    }

    fn responses_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=2).prop_flat_map(|t| {
            prop::collection::vec(prop::collection::vec(-100.0f64..100.0, t), 2..30)
        })
    }

    proptest! {
        #[test]
        fn variance_translation_invariant(rs in responses_strategy(), shift in -1e3f64..1e3) {
            let base = variance_uncertainty(&rs).unwrap();
            let moved: Vec<Vec<f64>> = rs.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let after = variance_uncertainty(&moved).unwrap();
            prop_assert!((base - after).abs() <= 1e-8 * (1.0 + base));
        }

        #[test]
        fn variance_scales_quadratically(rs in responses_strategy(), c in -10.0f64..10.0) {
            let base = variance_uncertainty(&rs).unwrap();
            let scaled: Vec<Vec<f64>> = rs.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
            let after = variance_uncertainty(&scaled).unwrap();
            prop_assert!((c * c * base - after).abs() <= 1e-9 * (1.0 + after));
        }

        #[test]
        fn entropy_permutation_invariant_and_bounded(
            values in prop::collection::vec(0u8..6, 1..40),
            rotate in 0usize..40,
        ) {
            let rs = scalars(&values.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let h = entropy_uncertainty(&rs).unwrap();
            let mut rotated = rs.clone();
            let k = rotate % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
            prop_assert_eq!(h, entropy_uncertainty(&rotated).unwrap());
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (rs.len() as f64).log2() + 1e-12);
        }

        #[test]
        fn zero_iff_identical(values in prop::collection::vec(0u8..3, 2..20)) {
            let rs = scalars(&values.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let identical = values.iter().all(|&v| v == values[0]);
            prop_assert_eq!(variance_uncertainty(&rs).unwrap() == 0.0, identical);
            prop_assert_eq!(entropy_uncertainty(&rs).unwrap() == 0.0, identical);
        }
    }
}
