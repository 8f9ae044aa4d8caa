//! Property tests over the objective and evaluation modules.

use lps::eval::{hungarian, nmi, novel_accuracy, overall_accuracy, seen_accuracy, OverallMatching};
use lps::numeric::{softmax, ProbVector};
use lps::objective::{
    adaptive_margins, estimate_class_distribution, pc_loss, uc_loss, ClassDistribution,
    Hyperparams, TrainSchedule,
};
use ndarray::Array2;
use proptest::prelude::*;

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-4.0f64..4.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row][c] + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pc_loss_ignores_view_order(
        (z, labels, perm) in (2usize..10, 2usize..5).prop_flat_map(|(n, k)| {
            (logits(n, k), prop::collection::vec(0usize..3, n), permutation(n))
        }),
        normalize in any::<bool>(),
    ) {
        let hp = Hyperparams { normalize_similarity: normalize, ..Hyperparams::default() };
        let base = pc_loss(z.view(), &labels, &hp).unwrap();
        let z_perm = z.select(ndarray::Axis(0), &perm);
        let labels_perm: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = pc_loss(z_perm.view(), &labels_perm, &hp).unwrap();
        prop_assert!((base.value - permuted.value).abs() < 1e-12);
        for (j, &i) in perm.iter().enumerate() {
            for c in 0..z.ncols() {
                prop_assert!((base.grad[[i, c]] - permuted.grad[[j, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pc_loss_is_non_negative(
        (z, labels) in (2usize..10, 2usize..5).prop_flat_map(|(n, k)| {
            (logits(n, k), prop::collection::vec(0usize..3, n))
        }),
    ) {
        let value = pc_loss(z.view(), &labels, &Hyperparams::default()).unwrap().value;
        prop_assert!(value >= 0.0, "{value}");
    }

    #[test]
    fn uc_loss_ignores_candidate_order(
        (z, perm) in (4usize..12, 2usize..5).prop_flat_map(|(n, k)| (logits(n, k), permutation(n))),
    ) {
        // Views 0/1 and 2/3 are the two pairs; the remaining rows only act as candidates.
        let hp = Hyperparams::default();
        let pairs = [(0, 1), (2, 3)];
        let base = uc_loss(z.view(), &pairs, &hp).unwrap();
        let z_perm = z.select(ndarray::Axis(0), &perm);
        let pos = |i: usize| perm.iter().position(|&p| p == i).unwrap();
        let pairs_perm: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (pos(a), pos(b))).collect();
        let permuted = uc_loss(z_perm.view(), &pairs_perm, &hp).unwrap();
        prop_assert!((base.value - permuted.value).abs() < 1e-12);
        for (j, &i) in perm.iter().enumerate() {
            for c in 0..z.ncols() {
                prop_assert!((base.grad[[i, c]] - permuted.grad[[j, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn estimator_moves_toward_added_sample(
        base in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..8),
        added in prop::collection::vec(-3.0f64..3.0, 4),
        step in 0usize..=100,
    ) {
        let hp = Hyperparams::default();
        let sched = TrainSchedule::new(step, 100).unwrap();
        let seen = [0, 1];
        let probs: Vec<ProbVector> = base.iter().map(|z| softmax(z).unwrap()).collect();
        let y = softmax(&added).unwrap();
        let before = estimate_class_distribution(4, &probs, &[] as &[ProbVector], &seen, sched, &hp);
        let mut grown = probs.clone();
        grown.push(y.clone());
        let after = estimate_class_distribution(4, &grown, &[] as &[ProbVector], &seen, sched, &hp);

        let sum: f64 = after.pi_hat().as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        let n = probs.len() as f64;
        for j in 0..4 {
            let expected = (n * before.pi_hat().as_slice()[j] + y.as_slice()[j]) / (n + 1.0);
            prop_assert!((after.pi_hat().as_slice()[j] - expected).abs() < 1e-12);
        }
        let dist = |p: &ClassDistribution| -> f64 {
            p.pi_hat().as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b).abs()).sum()
        };
        prop_assert!(dist(&after) <= dist(&before) + 1e-12);
    }

    #[test]
    fn estimator_output_is_a_distribution(
        labeled in prop::collection::vec(prop::collection::vec(-8.0f64..8.0, 5), 0..6),
        unlabeled in prop::collection::vec(prop::collection::vec(-8.0f64..8.0, 5), 0..6),
        step in 0usize..=50,
    ) {
        let l: Vec<ProbVector> = labeled.iter().map(|z| softmax(z).unwrap()).collect();
        let u: Vec<ProbVector> = unlabeled.iter().map(|z| softmax(z).unwrap()).collect();
        let sched = TrainSchedule::new(step, 50).unwrap();
        let dist = estimate_class_distribution(5, &l, &u, &[1, 3], sched, &Hyperparams::default());
        prop_assert!(ProbVector::new(dist.pi_hat().as_slice().to_vec()).is_ok());
        let margins = adaptive_margins(&dist, 10.0);
        prop_assert!(margins.iter().all(|m| *m <= 0.0 && m.is_finite()));
    }

    #[test]
    fn hungarian_matches_brute_force(
        cost in (1usize..7).prop_flat_map(|n| {
            prop::collection::vec(prop::collection::vec(-20i32..20, n), n)
        }),
    ) {
        let cost: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect();
        let result = hungarian(&cost).unwrap();
        let mut cols = result.mapping.clone();
        cols.sort_unstable();
        prop_assert_eq!(cols, (0..cost.len()).collect::<Vec<_>>());
        let realized: f64 = result.mapping.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        prop_assert_eq!(realized, result.total_cost);
        prop_assert_eq!(result.total_cost, brute_force_min(&cost));
    }

    #[test]
    fn novel_accuracy_ignores_cluster_names(
        samples in prop::collection::vec((0usize..6, 0usize..6), 1..40),
        perm in permutation(6),
    ) {
        let (preds, targets): (Vec<usize>, Vec<usize>) = samples.into_iter().unzip();
        let novel = [3, 4, 5];
        let relabeled: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        prop_assert_eq!(
            novel_accuracy(&preds, &targets, &novel).unwrap(),
            novel_accuracy(&relabeled, &targets, &novel).unwrap()
        );
    }

    #[test]
    fn accuracies_are_fractions_and_nmi_is_symmetric(
        samples in prop::collection::vec((0usize..6, 0usize..6), 1..40),
    ) {
        let (preds, targets): (Vec<usize>, Vec<usize>) = samples.into_iter().unzip();
        let (seen, novel) = ([0, 1, 2], [3, 4, 5]);
        let values = [
            seen_accuracy(&preds, &targets, &seen).unwrap(),
            novel_accuracy(&preds, &targets, &novel).unwrap(),
            overall_accuracy(&preds, &targets, &seen, &novel, OverallMatching::Pinned).unwrap(),
            overall_accuracy(&preds, &targets, &seen, &novel, OverallMatching::Free).unwrap(),
        ];
        for v in values.into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let a = nmi(&preds, &targets).unwrap();
        let b = nmi(&targets, &preds).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
    }
}
