use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use ugprobe::data::ResponseTable;
use ugprobe::masking::{
    default_fractions, random_importance, remove_and_retrain, remove_and_test, subset_masking_comparison, MaskMode,
    SubsetStrategy,
};
use ugprobe::probe::{train_eval_once, train_probe_repeated, ProtocolConfig};
use ugprobe::rng::rng_from_seed;
use ugprobe::segmentation::{quantile_subsets, sort_desc_by_uncertainty, take_top_uncertain};
use ugprobe::synthetic::{
    end_to_end_check, generate_planted, oracle_gap_experiment, GapConfig, GroupSpec, SyntheticConfig,
};
use ugprobe::uncertainty::{score_dataset, score_responses, Estimator, UncertaintyVector};

fn protocol(seed: u64) -> ProtocolConfig {
    ProtocolConfig {
        master_seed: seed,
        ..ProtocolConfig::default()
    }
}

fn random_scores(n: usize, seed: u64) -> UncertaintyVector {
    let mut rng = rng_from_seed(seed);
    UncertaintyVector {
        ids: (0..n).map(|i| format!("q{i}")).collect(),
        scores: (0..n).map(|_| rng.random::<f64>()).collect(),
        n_responses: vec![20; n],
        estimator: Estimator::Variance,
        excluded: Vec::new(),
    }
}

#[test]
fn tier_means_increase_with_sigma() {
    let config = SyntheticConfig {
        n: 1800,
        d: 16,
        groups: [0.1, 1.0, 5.0]
            .iter()
            .enumerate()
            .map(|(g, &sigma)| GroupSpec {
                fraction: 1.0 / 3.0,
                support: 2 + 2 * g,
                sigma,
                responses: 20,
            })
            .collect(),
        weight_scale: 1.0,
        master_seed: 5,
        nested_supports: true,
        target_noise_scale: 2.0,
    };
    let bundle = generate_planted(&config).unwrap();
    let ds = bundle.dataset().unwrap();
    let scores = score_dataset(&ds, Estimator::Variance, 20).unwrap();
    assert!(scores.excluded.is_empty());
    let means: Vec<f64> = (0..3)
        .map(|g| {
            let rows = bundle.group_rows(g);
            rows.iter().map(|&i| scores.scores[i]).sum::<f64>() / rows.len() as f64
        })
        .collect();
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
}

#[test]
fn thin_sample_is_excluded() {
    let mut table = ResponseTable::new(1);
    table.insert("a", vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    table.insert("b", vec![vec![4.0]]).unwrap();
    let v = score_responses(&table, Estimator::Variance, 2).unwrap();
    assert_eq!(v.ids, vec!["a"]);
    assert_eq!(v.excluded, vec!["b"]);
}

#[test]
fn top_k_matches_full_sort_oracle() {
    let scores = random_scores(39_585, 1);
    let top = take_top_uncertain(&sort_desc_by_uncertainty(&scores), 20_000).unwrap();
    let mut sorted = scores.scores.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[19_999];
    let mut expected: Vec<&String> = scores
        .ids
        .iter()
        .zip(&scores.scores)
        .filter(|(_, s)| **s >= threshold)
        .map(|(id, _)| id)
        .collect();
    let mut got: Vec<&String> = top.ids.iter().collect();
    expected.sort();
    got.sort();
    assert_eq!(got, expected);
}

#[test]
fn quantile_subsets_at_full_scale_are_disjoint() {
    let ranking = sort_desc_by_uncertainty(&random_scores(37_539, 2));
    let q = quantile_subsets(&ranking, 5000).unwrap();
    let mut all: Vec<&String> = q.iter().flat_map(|(_, r)| r.ids.iter()).collect();
    assert!(q.iter().all(|(_, r)| r.len() == 5000));
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 15_000);
}

#[test]
fn planted_noiseless_probe_is_near_perfect() {
    let mut rng = rng_from_seed(3);
    let x = DMatrix::from_fn(200, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = DMatrix::from_fn(8, 1, |_, _| rng.random_range(-2.0..2.0));
    let y = &x * w;
    let run = train_eval_once(&x, &y, &ProtocolConfig::default(), 0).unwrap();
    assert!(run.metrics.r2 >= 0.999, "{}", run.metrics.r2);
}

#[test]
fn pure_noise_targets_do_not_fit() {
    for seed in 0..20u64 {
        let mut rng = rng_from_seed(100 + seed);
        let x = DMatrix::from_fn(500, 50, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(500, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let run = train_eval_once(&x, &y, &ProtocolConfig::default(), seed).unwrap();
        assert!(run.metrics.r2 <= 0.05, "seed {seed}: r2 {}", run.metrics.r2);
    }
}

#[test]
fn repeated_mean_lies_within_seed_range() {
    let bundle = generate_planted(&SyntheticConfig::homogeneous(600, 16, 4, 0.5, 5, 8)).unwrap();
    let ds = bundle.dataset().unwrap();
    let m = train_probe_repeated(&ds.features(), &ds.target_matrix(), &protocol(8), 0).unwrap();
    let r2: Vec<f64> = m.per_seed.iter().map(|p| p.r2).collect();
    assert_eq!(r2.len(), 5);
    let (lo, hi) = r2.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    assert!(lo <= m.r2 && m.r2 <= hi);
}

#[test]
fn frozen_probe_masking_examples() {
    let (d, s) = (64, 8);
    let fraction = s as f64 / d as f64;
    let mut random_below = 0;
    for trial in 0..20u64 {
        let bundle = generate_planted(&SyntheticConfig::homogeneous(1000, d, s, 0.3, 10, 40 + trial)).unwrap();
        let ds = bundle.dataset().unwrap();
        let p = protocol(40 + trial);
        let curve = remove_and_test(&ds, &bundle.importance, &[fraction, 1.0], MaskMode::PerSample, &p).unwrap();
        // no-op mask is bit-identical to the unmasked evaluation
        assert_eq!(curve.metrics[1], curve.baseline);
        assert!(
            (curve.metrics[0].r2 - curve.baseline.r2).abs() <= 0.02,
            "trial {trial}: {} vs {}",
            curve.metrics[0].r2,
            curve.baseline.r2
        );
        let random = random_importance(ds.ids(), d, 700 + trial).unwrap();
        let rc = remove_and_test(&ds, &random, &[fraction], MaskMode::PerSample, &p).unwrap();
        if rc.metrics[0].r2 < curve.metrics[0].r2 {
            random_below += 1;
        }
    }
    assert_eq!(random_below, 20);
}

#[test]
fn retrain_curve_is_monotone_and_anchored() {
    let bundle = generate_planted(&SyntheticConfig::homogeneous(2000, 48, 12, 0.5, 10, 12)).unwrap();
    let ds = bundle.dataset().unwrap();
    let fractions = default_fractions();
    for mode in [MaskMode::PerSample, MaskMode::Global] {
        let curve = remove_and_retrain(&ds, &bundle.importance, &fractions, mode, &protocol(12)).unwrap();
        assert_eq!(curve.metrics.last().unwrap(), &curve.baseline);
        for w in curve.metrics.windows(2) {
            assert!(w[1].r2 >= w[0].r2 - 0.05, "{mode}: {} then {}", w[0].r2, w[1].r2);
        }
    }
}

#[test]
fn per_sample_masks_leak_group_identity_in_mixtures() {
    // Zeroed positions differ by group, so a retrained probe can do better
    // on masked data than on the full features.
    let bundle = generate_planted(&SyntheticConfig::tiered(2000, 48, 2, (0.2, 1.0), (6, 24), 10, 12)).unwrap();
    let ds = bundle.dataset().unwrap();
    let curve = remove_and_retrain(&ds, &bundle.importance, &[0.3], MaskMode::PerSample, &protocol(12)).unwrap();
    assert!(curve.metrics[0].r2 > curve.baseline.r2);
}

#[test]
fn subset_comparison_examples() {
    let config = SyntheticConfig::tiered(3000, 64, 3, (0.1, 2.0), (4, 32), 20, 21).with_fractions(&[0.6, 0.2, 0.2]);
    let s_low = config.groups[0].support;
    let bundle = generate_planted(&config).unwrap();
    let ds = bundle.dataset().unwrap();
    let scores = score_dataset(&ds, Estimator::Variance, 2).unwrap();
    let fractions = default_fractions();
    let cmp = subset_masking_comparison(
        &ds,
        &scores,
        &bundle.importance,
        500,
        &fractions,
        MaskMode::PerSample,
        &protocol(21),
        SubsetStrategy::Frozen,
    )
    .unwrap();
    assert!(cmp.curves().iter().all(|c| c.baseline.r2 > 0.0));
    let low = cmp.low.min_fraction_reaching(0.9).unwrap();
    let high = cmp.high.min_fraction_reaching(0.9).unwrap();
    assert!(high > low, "low {low} high {high}");
    let bound = s_low as f64 / 64.0;
    let next = fractions.iter().copied().find(|&f| f >= bound).unwrap();
    let step_after = fractions.iter().copied().find(|&f| f > next).unwrap_or(next);
    assert!(low <= step_after, "low {low} vs {bound}");
    assert_eq!(cmp.to_csv().lines().count(), 1 + 3 * fractions.len());

    let retrained = subset_masking_comparison(
        &ds,
        &scores,
        &bundle.importance,
        500,
        &[0.25, 1.0],
        MaskMode::PerSample,
        &protocol(21),
        SubsetStrategy::Retrain,
    )
    .unwrap();
    assert_eq!(retrained.high.metrics[1], retrained.high.baseline);
}

#[test]
fn identical_scores_give_similar_subset_curves() {
    let bundle = generate_planted(&SyntheticConfig::homogeneous(3000, 32, 6, 0.5, 4, 30)).unwrap();
    let ds = bundle.dataset().unwrap();
    let flat = UncertaintyVector {
        ids: ds.ids().to_vec(),
        scores: vec![1.0; ds.n()],
        n_responses: vec![4; ds.n()],
        estimator: Estimator::Variance,
        excluded: Vec::new(),
    };
    let cmp = subset_masking_comparison(
        &ds,
        &flat,
        &bundle.importance,
        1000,
        &[0.25, 0.5, 1.0],
        MaskMode::PerSample,
        &protocol(30),
        SubsetStrategy::Frozen,
    )
    .unwrap();
    for k in 0..3 {
        let r: Vec<f64> = cmp.curves().iter().map(|c| c.metrics[k].r2).collect();
        let spread = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 0.05, "fraction index {k}: {r:?}");
    }
}

#[test]
fn segment_uncertainty_decreases_along_the_report() {
    let report = end_to_end_check(
        &SyntheticConfig::tiered(2000, 16, 4, (0.1, 2.0), (2, 8), 10, 3),
        400,
        200,
        &protocol(3),
    )
    .unwrap();
    assert_eq!(report.rows.len(), 9);
    for w in report.rows.windows(2) {
        assert!(w[1].mean_uncertainty < w[0].mean_uncertainty);
    }
    assert!(report.warnings.is_empty());
}

#[test]
fn generalisation_gap_is_nonnegative_on_average() {
    let mut c = GapConfig::new(64, vec![2, 8, 32], 48, 1.0, 10);
    c.n_test = 200;
    let table = oracle_gap_experiment(&c).unwrap();
    for row in &table.rows {
        assert!(row.mean_gap >= -1e-6, "{row:?}");
    }
    assert_eq!(table.to_csv().lines().count(), 4);
}
