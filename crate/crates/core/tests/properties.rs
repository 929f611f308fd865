use bridgerec_core::bridge::marginal_weights;
use bridgerec_core::cluster::{assign_index, pair_agreement};
use bridgerec_core::data::{Dataset, Pattern, SyntheticSpec, UserSequence};
use bridgerec_core::metrics::{hit, ndcg, MetricSet};
use bridgerec_core::model::rank_items;
use bridgerec_core::schedule::{ScheduleKind, ScheduleParams};
use bridgerec_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn sequences() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0usize..30, 3..20), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_reconstructs_every_sequence(seqs in sequences()) {
        let users = seqs.iter().enumerate().map(|(i, s)| UserSequence { user: format!("u{i}"), items: s.clone() }).collect();
        let ds = Dataset::new(users, 30).unwrap();
        let split = ds.split();
        for (u, s) in ds.users().iter().zip(&split.users) {
            prop_assert_eq!(s.reconstruct(), u.items.clone());
            prop_assert_eq!(s.test, *u.items.last().unwrap());
        }
    }

    #[test]
    fn text_format_round_trips(seqs in sequences()) {
        let users = seqs.iter().enumerate().map(|(i, s)| UserSequence { user: format!("u{i}"), items: s.clone() }).collect();
        let ds = Dataset::new(users, 30).unwrap();
        let back = Dataset::parse(&ds.to_text()).unwrap();
        prop_assert!(back.dropped.is_empty());
        prop_assert_eq!(back.dataset, ds);
    }

    #[test]
    fn cluster_assignment_ignores_positive_scale(
        u in prop::collection::vec(-5.0f64..5.0, 4),
        centers in prop::collection::vec(-1.0f64..1.0, 12),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3));
        let c = Tensor::matrix(3, 4, centers).unwrap();
        let scaled: Vec<f64> = u.iter().map(|x| x * scale).collect();
        prop_assert_eq!(assign_index(&u, &c).unwrap(), assign_index(&scaled, &c).unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for r in 0..3 {
            let s: f64 = v.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(v.row(r).iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn metrics_are_bounded_and_monotone(rank in 1usize..200, k in 1usize..50) {
        let (h, n) = (hit(rank, k), ndcg(rank, k));
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert!(n <= h);
        prop_assert!(hit(rank, k + 1) >= h);
        prop_assert!(ndcg(rank, k + 1) >= n);
    }

    #[test]
    fn metric_sets_are_percentages(ranks in prop::collection::vec(1usize..40, 1..30)) {
        let m = MetricSet::from_ranks(ranks.iter().copied()).unwrap();
        for v in [m.hr1, m.hr5, m.hr10, m.ndcg5, m.ndcg10] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert!(m.hr1 <= m.hr5 && m.hr5 <= m.hr10);
    }

    #[test]
    fn ranking_is_a_permutation(scores in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        let ranked = rank_items(&scores);
        let mut seen = ranked.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        for w in ranked.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn gmax_mean_is_a_convex_combination(t in 0.0f64..=1.0, beta1 in 1.0f64..50.0) {
        let p = ScheduleParams::new(ScheduleKind::Gmax, 0.01, beta1).unwrap();
        let w = marginal_weights(&p.coeffs(t).unwrap()).unwrap();
        prop_assert!(w.w0 >= 0.0 && w.w1 >= 0.0);
        prop_assert!((w.w0 + w.w1 - 1.0).abs() < 1e-12);
        prop_assert!(w.var >= 0.0);
    }

    #[test]
    fn agreement_ignores_label_names(labels in prop::collection::vec(0usize..3, 2..30)) {
        let renamed: Vec<usize> = labels.iter().map(|l| (l + 1) % 3).collect();
        prop_assert_eq!(pair_agreement(&labels, &renamed), 1.0);
    }
}

#[test]
fn noise_free_markov_is_deterministic() {
    let spec = SyntheticSpec { pattern: Pattern::Markov, num_users: 30, ..SyntheticSpec::default() };
    let ds = spec.generate().unwrap();
    assert_eq!(ds.num_users(), 30);
    for u in ds.users() {
        for w in u.items.windows(2) {
            assert_eq!(w[1], spec.successor(w[0]));
        }
    }
}

#[test]
fn zipf_starts_give_a_popular_head() {
    let spec = SyntheticSpec { num_users: 400, num_items: 40, block_size: 40, ..SyntheticSpec::default() };
    let ds = spec.generate().unwrap();
    let mut first = vec![0usize; 40];
    for u in ds.users() {
        first[u.items[0]] += 1;
    }
    assert!(first[0] > first[10] && first[10] >= first[39]);
}
