//! Rank and linear correlation coefficients.

use crate::error::{Error, Result};

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "correlation inputs differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: a.len(),
            context: "correlation".into(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("correlation inputs must be finite".into()));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Sample (Pearson) correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("pearson: zero-variance input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson_r(&average_ranks(a), &average_ranks(b))
        .map_err(|_| Error::Degenerate("spearman: all values tied in one input".into()))
}

fn tied_pairs(sorted: &[f64]) -> i64 {
    let mut total = 0i64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as i64;
        total += t * (t - 1) / 2;
        i = j;
    }
    total
}

/// Merge sort on `v`, returning the number of inversions (swaps).
fn sort_count_swaps(v: &mut [f64], buf: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = v.split_at_mut(mid);
        let (lb, rb) = buf.split_at_mut(mid);
        sort_count_swaps(left, lb) + sort_count_swaps(right, rb)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as i64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Integer pieces of tau-b: `(concordant - discordant, pairs, ties_a, ties_b)`.
pub fn kendall_counts(a: &[f64], b: &[f64]) -> Result<(i64, i64, i64, i64)> {
    check_pair(a, b)?;
    let n = a.len();
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let total = (n as i64) * (n as i64 - 1) / 2;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ties_a = tied_pairs(&xs);

    // pairs tied in both coordinates
    let mut joint = 0i64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pairs[j] == pairs[i] {
            j += 1;
        }
        let t = (j - i) as i64;
        joint += t * (t - 1) / 2;
        i = j;
    }

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = sort_count_swaps(&mut ys, &mut buf);
    let ties_b = tied_pairs(&ys);

    let c_minus_d = total - ties_a - ties_b + joint - 2 * swaps;
    Ok((c_minus_d, total, ties_a, ties_b))
}

/// The tau-b ratio from integer pair counts.
pub fn tau_b_from_counts(c_minus_d: i64, total: i64, ties_a: i64, ties_b: i64) -> Result<f64> {
    let denom = (total - ties_a) as f64 * (total - ties_b) as f64;
    if denom == 0.0 {
        return Err(Error::Degenerate("kendall: all values tied in one input".into()));
    }
    Ok((c_minus_d as f64 / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Kendall tau-b in O(n log n).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    let (cd, total, ta, tb) = kendall_counts(a, b)?;
    tau_b_from_counts(cd, total, ta, tb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        assert_eq!(kendall_tau(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0);
        let tau = kendall_tau(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap();
        assert!((tau - 2.0 / 3.0).abs() < 1e-12);
        let rho = spearman_rho(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
        let r = pearson_r(&[1., 2., 3.], &[1., 2., 4.]).unwrap();
        // 3 / sqrt(2 * 14/3)
        assert!((r - 3.0 / (28.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.981_980_506_061_965_7).abs() < 1e-12);
    }

    #[test]
    fn affine_and_reversal() {
        let a = [0.5, 1.0, 4.0, 9.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson_r(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson_r(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let sq: Vec<f64> = a.iter().map(|x| x * x).collect();
        assert_eq!(spearman_rho(&a, &sq).unwrap(), 1.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10., 20., 10., 30.]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(kendall_tau(&[1., 1., 1.], &[1., 2., 3.]), Err(Error::Degenerate(_))));
        assert!(matches!(spearman_rho(&[1., 2.], &[5., 5.]), Err(Error::Degenerate(_))));
        assert!(matches!(pearson_r(&[2., 2.], &[1., 3.]), Err(Error::Degenerate(_))));
        assert!(kendall_tau(&[1.], &[1.]).is_err());
        assert!(kendall_tau(&[1., 2.], &[1.]).is_err());
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..8).prop_map(f64::from), n),
                prop::collection::vec(-50.0f64..50.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn symmetric_and_antisymmetric((a, b) in vec_pair()) {
            let neg_b: Vec<f64> = b.iter().map(|v| -v).collect();
            if let (Ok(k1), Ok(k2), Ok(k3)) = (kendall_tau(&a, &b), kendall_tau(&b, &a), kendall_tau(&a, &neg_b)) {
                prop_assert!((k1 - k2).abs() < 1e-12);
                prop_assert!((k1 + k3).abs() < 1e-12);
            }
            if let (Ok(s1), Ok(s2), Ok(s3)) = (spearman_rho(&a, &b), spearman_rho(&b, &a), spearman_rho(&a, &neg_b)) {
                prop_assert!((s1 - s2).abs() < 1e-12);
                prop_assert!((s1 + s3).abs() < 1e-12);
            }
            if let (Ok(p1), Ok(p2), Ok(p3)) = (pearson_r(&a, &b), pearson_r(&b, &a), pearson_r(&a, &neg_b)) {
                prop_assert!((p1 - p2).abs() < 1e-12);
                prop_assert!((p1 + p3).abs() < 1e-12);
            }
        }

        #[test]
        fn rank_coefficients_monotone_invariant((a, b) in vec_pair()) {
            let warped: Vec<f64> = b.iter().map(|v| v.powi(3) + v).collect();
            if let Ok(k) = kendall_tau(&a, &b) {
                prop_assert_eq!(k, kendall_tau(&a, &warped).unwrap());
            }
            if let Ok(s) = spearman_rho(&a, &b) {
                prop_assert_eq!(s, spearman_rho(&a, &warped).unwrap());
            }
        }
    }
}
