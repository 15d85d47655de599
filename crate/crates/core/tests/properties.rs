//! Randomised invariants of metrics, fusion, dropout and the file formats.

use dialrank::fusion::{consensus, ensemble, InstanceId, LogitMatrix, Provenance};
use dialrank::joint::{dropped_count, round_dropout, truncated_rows};
use dialrank::metrics::{mean_rank, mrr, ndcg, rank_of, ranking, recall_at, RankedInstance};
use dialrank::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(c: usize) -> impl Strategy<Value = RankedInstance> {
    (
        prop::collection::vec(prop_oneof![-3.0..3.0f64, (0..3).prop_map(f64::from)], c),
        0..c,
        prop::collection::vec(prop_oneof![Just(0.0), 0.0..=1.0f64], c),
    )
        .prop_map(|(scores, gt, mut rel)| {
            rel[gt] = 1.0;
            RankedInstance { scores, gt_index: gt, relevance: Some(rel) }
        })
}

fn logits(n: usize, c: usize) -> impl Strategy<Value = LogitMatrix> {
    prop::collection::vec(-10.0..10.0f64, n * c).prop_map(move |v| {
        let ids = (0..n).map(|i| InstanceId { example_id: i, round: 1 }).collect();
        LogitMatrix::new(ids, Tensor::new(vec![n, c], v).unwrap(), Provenance::ImageOnly).unwrap()
    })
}

proptest! {
    #[test]
    fn recall_is_monotone_and_bounds_hold(xs in prop::collection::vec(instance(12), 1..40)) {
        let (r1, r5, r10) = (recall_at(&xs, 1).unwrap(), recall_at(&xs, 5).unwrap(), recall_at(&xs, 10).unwrap());
        prop_assert!(r1 <= r5 && r5 <= r10 && r10 <= 1.0);
        let m = mrr(&xs).unwrap();
        prop_assert!(m >= r1 && m <= 1.0);
        let mr = mean_rank(&xs).unwrap();
        prop_assert!((1.0..=12.0).contains(&mr));
        for x in &xs {
            let n = ndcg(x).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
        }
    }

    #[test]
    fn ranking_is_a_permutation_consistent_with_rank_of(x in instance(9)) {
        let order = ranking(&x.scores);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..9).collect::<Vec<_>>());
        for (pos, &j) in order.iter().enumerate() {
            prop_assert_eq!(rank_of(&x.scores, j).unwrap(), pos + 1);
        }
        for w in order.windows(2) {
            let (a, b) = (x.scores[w[0]], x.scores[w[1]]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
    }

    #[test]
    fn metrics_ignore_monotone_rescaling(x in instance(10), scale in 0.1..10.0f64, shift in -5.0..5.0f64) {
        let mut y = x.clone();
        for s in &mut y.scores {
            *s = *s * scale + shift;
        }
        // ties may break differently after rounding, so compare only when none exist
        let distinct = { let mut s = x.scores.clone(); s.sort_by(f64::total_cmp); s.windows(2).all(|w| w[0] != w[1]) };
        if distinct {
            prop_assert_eq!(ranking(&x.scores), ranking(&y.scores));
            prop_assert_eq!(ndcg(&x).unwrap(), ndcg(&y).unwrap());
        }
    }

    #[test]
    fn consensus_commutes_and_associates(a in logits(4, 5), b in logits(4, 5), c in logits(4, 5)) {
        let (ab, ba) = (consensus(&a, &b).unwrap(), consensus(&b, &a).unwrap());
        prop_assert_eq!(ab.values(), ba.values());
        let left = consensus(&consensus(&a, &b).unwrap(), &c).unwrap();
        let right = consensus(&a, &consensus(&b, &c).unwrap()).unwrap();
        prop_assert!(left.values().max_abs_diff(right.values()) < 1e-12);
        let all = ensemble(&[a.clone(), b.clone(), c.clone()]).unwrap();
        prop_assert_eq!(all.values(), left.values());
    }

    #[test]
    fn ensemble_with_itself_keeps_rankings(a in logits(6, 7), copies in 1usize..4) {
        let all = vec![a.clone(); copies];
        prop_assert_eq!(ensemble(&all).unwrap().rankings(), a.rankings());
    }

    #[test]
    fn round_dropout_keeps_the_caption(n_h in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = round_dropout(n_h, n_h, &mut rng);
        let kept = plan.kept_rows();
        prop_assert_eq!(kept.len() + dropped_count(n_h), n_h);
        prop_assert_eq!(kept[0], 0);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn truncation_keeps_caption_and_latest_rows(n in 1usize..12, k in 0usize..12) {
        let rows = truncated_rows(n, k);
        prop_assert_eq!(rows[0], 0);
        prop_assert_eq!(rows.len(), 1 + k.min(n - 1));
        prop_assert_eq!(*rows.last().unwrap(), if k == 0 { 0 } else { n - 1 });
    }

    #[test]
    fn logit_text_round_trips(a in logits(5, 4)) {
        let back = LogitMatrix::read_from(a.to_text().as_bytes(), Provenance::ImageOnly).unwrap();
        prop_assert_eq!(back, a);
    }
}
