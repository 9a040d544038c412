mod common;

use common::*;
use proptest::prelude::*;
use smirisk::eval::{auc, tpr_at_fpr, youden_threshold, ScoredSet};
use smirisk::nnet::{backward, batch_loss, forward};

#[test]
fn analytic_gradients_match_central_differences() {
    let r = gradient_oracle(30, 11);
    assert!(r.coordinates_checked > 1000, "only {} coordinates checked", r.coordinates_checked);
    assert!(r.max_relative_error < 1e-5, "max relative error {}", r.max_relative_error);
}

#[test]
fn reference_forward_agrees_with_library_forward() {
    let mut r = rng(3);
    for _ in 0..200 {
        let (p, xs, ys) = random_tiny_model(&mut r);
        for x in &xs {
            let (z, _) = reference_forward(&p, x);
            let lib = forward(&p, x).unwrap();
            assert!((lib - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        }
        let refs: Vec<_> = xs.iter().collect();
        let (loss, _) = reference_loss(&p, &xs, &ys);
        assert!((batch_loss(&p, &refs, &ys).unwrap() - loss).abs() < 1e-12);
        assert!((backward(&p, &refs, &ys).unwrap().0 - loss).abs() < 1e-12);
    }
}

#[test]
fn auc_matches_pairwise_count_on_random_sets() {
    let worst = auc_oracle(200, 21).unwrap();
    assert!(worst <= 1e-12);
}

#[test]
fn youden_matches_exhaustive_scan() {
    youden_oracle(200, 31).unwrap();
}

#[test]
fn auc_of_perfect_and_reversed_ranking() {
    let s = ScoredSet::new(vec![0.1, 0.2, 0.8, 0.9], vec![false, false, true, true]).unwrap();
    assert_eq!(auc(&s).unwrap(), 1.0);
    let r = ScoredSet::new(vec![0.9, 0.8, 0.2, 0.1], vec![false, false, true, true]).unwrap();
    assert_eq!(auc(&r).unwrap(), 0.0);
    let tied = ScoredSet::new(vec![0.5; 6], vec![true, false, true, false, false, true]).unwrap();
    assert_eq!(auc(&tied).unwrap(), 0.5);
}

fn scored_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            prop::collection::vec((-64i32..64).prop_map(|k| f64::from(k) / 8.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn auc_in_unit_interval_and_equal_to_brute_force((scores, labels) in scored_strategy()) {
        let a = auc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - brute_force_auc(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn reversing_scores_reflects_auc((scores, labels) in scored_strategy()) {
        let a = auc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let b = auc(&ScoredSet::new(scores.iter().map(|s| -s).collect(), labels).unwrap()).unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn youden_point_is_a_valid_optimum((scores, labels) in scored_strategy()) {
        let s = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        let op = youden_threshold(&s).unwrap();
        prop_assert!(scores.contains(&op.threshold));
        let (t, ..) = exhaustive_youden(&scores, &labels);
        prop_assert_eq!(op.threshold, t);
        prop_assert!(op.youden_j() >= -1e-12);
    }

    #[test]
    fn tpr_is_monotone_in_allowed_fpr((scores, labels) in scored_strategy(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = ScoredSet::new(scores, labels).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(tpr_at_fpr(&s, lo).unwrap() <= tpr_at_fpr(&s, hi).unwrap());
        prop_assert_eq!(tpr_at_fpr(&s, 1.0).unwrap(), 1.0);
    }
}
