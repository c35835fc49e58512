//! Metric oracles: brute-force AP and thresholds, plus invariances.

use approx::assert_abs_diff_eq;
use molex::metrics::{accuracy, average_precision, threshold_candidates, tune_threshold, Objective, ScoredSet};
use molex::tensor::derived_rng;
use proptest::prelude::*;
use rand::Rng;

/// Sweep every distinct score as a threshold, highest first, with a fresh
/// count over the whole set each time.
fn brute_force_ap(set: &ScoredSet) -> f64 {
    let mut cuts = set.scores.clone();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let npos = set.positives() as f64;
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in cuts {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&s, &y) in set.scores.iter().zip(&set.labels) {
            if s >= t {
                if y == 1.0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let recall = tp as f64 / npos;
        ap += (recall - prev) * (tp as f64 / (tp + fp) as f64);
        prev = recall;
    }
    ap
}

/// Random set with both classes; coarse scores so ties are common.
fn random_set(rng: &mut impl Rng, max_len: usize) -> ScoredSet {
    loop {
        let n = rng.gen_range(2..=max_len);
        let levels = rng.gen_range(2..=12) as f64;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * levels).floor() / levels).collect();
        let labels: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let set = ScoredSet::new(scores, labels).unwrap();
        if set.positives() > 0 && set.negatives() > 0 {
            return set;
        }
    }
}

#[test]
fn ap_matches_brute_force_exactly() {
    let mut rng = derived_rng(2024, "ap-oracle");
    for i in 0..1000 {
        let set = random_set(&mut rng, 20);
        let fast = average_precision(&set).unwrap();
        let slow = brute_force_ap(&set);
        assert_eq!(fast.to_bits(), slow.to_bits(), "set {i}: {set:?}");
    }
}

#[test]
fn tuned_threshold_is_exhaustively_optimal() {
    let mut rng = derived_rng(7, "threshold-oracle");
    for _ in 0..500 {
        let set = random_set(&mut rng, 20);
        for objective in [Objective::Balanced, Objective::Overall] {
            let (t, best) = tune_threshold(&set, objective).unwrap();
            let pick = |a: molex::metrics::Accuracy| match objective {
                Objective::Balanced => a.balanced,
                Objective::Overall => a.overall,
            };
            assert_eq!(pick(accuracy(&set, t)), best);
            // every cut strictly between two distinct scores, searched by hand
            let mut sorted = set.scores.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            for w in sorted.windows(2) {
                let p = w[0] + (w[1] - w[0]) * 0.25;
                assert!(pick(accuracy(&set, p)) <= best + 1e-15, "threshold {p} beats {t}");
            }
            assert!(threshold_candidates(&set.scores).contains(&t));
        }
    }
}

#[test]
fn random_scores_sit_near_the_positive_rate() {
    let mut rng = derived_rng(5, "random-ap");
    let labels: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
    let scores: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
    let ap = average_precision(&ScoredSet::new(scores, labels).unwrap()).unwrap();
    assert_abs_diff_eq!(ap, 0.5, epsilon = 0.1);
}

#[test]
fn single_class_sets_are_rejected() {
    let set = ScoredSet::new(vec![0.1, 0.9], vec![1.0, 1.0]).unwrap();
    assert!(average_precision(&set).is_err());
    assert!(tune_threshold(&set, Objective::Balanced).is_err());
    assert!(ScoredSet::new(vec![0.5], vec![0.5]).is_err());
    assert!(ScoredSet::new(vec![0.5, 0.2], vec![1.0]).is_err());
}

fn scored_set() -> impl Strategy<Value = ScoredSet> {
    prop::collection::vec((0u8..16, any::<bool>()), 2..40)
        .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
        .prop_map(|v| {
            let scores = v.iter().map(|p| p.0 as f64 / 16.0).collect();
            let labels = v.iter().map(|p| p.1 as u8 as f64).collect();
            ScoredSet::new(scores, labels).unwrap()
        })
}

proptest! {
    #[test]
    fn ap_ignores_monotone_rescaling(set in scored_set(), k in 0.1f64..5.0, shift in -3.0f64..3.0) {
        let base = average_precision(&set).unwrap();
        let logit = ScoredSet::new(
            set.scores.iter().map(|&s| (k * s + shift).exp() / (1.0 + (k * s + shift).exp())).collect(),
            set.labels.clone(),
        ).unwrap();
        let cubed = ScoredSet::new(set.scores.iter().map(|s| s * s * s).collect(), set.labels.clone()).unwrap();
        prop_assert_eq!(average_precision(&logit).unwrap(), base);
        prop_assert_eq!(average_precision(&cubed).unwrap(), base);
    }

    #[test]
    fn ap_is_a_probability(set in scored_set()) {
        let ap = average_precision(&set).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
        let perfect = ScoredSet::new(set.labels.clone(), set.labels.clone()).unwrap();
        prop_assert_eq!(average_precision(&perfect).unwrap(), 1.0);
    }
}
