mod common;

use std::collections::HashSet;

use ckge_core::dataset::{synthesize, GrowthMode, GrowthSpec};
use ckge_core::eval::{rank_query, Direction, EvalResult, FilterIndex};
use ckge_core::kg::{EmbeddingTable, Triple};
use ckge_core::rng;
use proptest::prelude::*;

use common::random_triple;

fn table(rows: usize, dim: usize) -> impl Strategy<Value = EmbeddingTable<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * dim)
        .prop_map(move |d| EmbeddingTable::from_vec(rows, dim, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranks_are_bounded_and_filtering_helps(
        ent_seed in any::<u64>(),
        (ent, rel) in (2usize..16).prop_flat_map(|n| (table(n, 3), table(2, 3))),
    ) {
        let n = ent.rows();
        let mut r = rng::stream(ent_seed, &[]);
        let known: HashSet<Triple> = (0..2 * n).map(|_| random_triple(n, 2, &mut r)).collect();
        let filter = FilterIndex::from_set(&known);
        for _ in 0..10 {
            let t = random_triple(n, 2, &mut r);
            for dir in [Direction::Head, Direction::Tail] {
                let raw = rank_query(&ent, &rel, t, dir, n, None).unwrap();
                let filtered = rank_query(&ent, &rel, t, dir, n, Some(&filter)).unwrap();
                prop_assert!(raw >= 1.0 && raw <= n as f64);
                prop_assert!(filtered >= 1.0 && filtered <= raw);
                prop_assert_eq!((raw * 2.0).fract(), 0.0);
            }
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(ranks in prop::collection::vec(1u32..50, 1..40)) {
        let ranks: Vec<f64> = ranks.into_iter().map(f64::from).collect();
        let res = EvalResult::from_ranks(&ranks).unwrap();
        prop_assert!(res.mrr > 0.0 && res.mrr <= 1.0);
        prop_assert!(res.hits1 <= res.hits10);
        prop_assert!((0.0..=1.0).contains(&res.hits10));
        prop_assert_eq!(res.queries, ranks.len());
    }

    #[test]
    fn synthetic_snapshots_only_grow(
        seed in any::<u64>(),
        mode in prop_oneof![Just(GrowthMode::Entity), Just(GrowthMode::Relation), Just(GrowthMode::Fact), Just(GrowthMode::Hybrid)],
        snapshots in 1usize..5,
    ) {
        let spec = GrowthSpec {
            base_entities: 40,
            base_relations: 4,
            base_facts: 200,
            snapshots,
            mode,
            seed,
            ..GrowthSpec::default()
        };
        let snaps = synthesize(&spec).unwrap();
        prop_assert_eq!(snaps.len(), snapshots);
        prop_assert_eq!(synthesize(&spec).unwrap(), snaps.clone());
        for w in snaps.windows(2) {
            prop_assert!(w[1].entities >= w[0].entities);
            prop_assert!(w[1].relations >= w[0].relations);
        }
        for s in &snaps {
            prop_assert!(!s.splits[0].is_empty());
            for &(h, r, t) in s.splits.iter().flatten() {
                prop_assert!((h as usize) < s.entities && (t as usize) < s.entities);
                prop_assert!((r as usize) < s.relations);
            }
        }
    }

    #[test]
    fn streams_are_pure_functions_of_their_tags(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        use rand::RngCore;
        let x = rng::stream(seed, &[a, b]).next_u64();
        prop_assert_eq!(x, rng::stream(seed, &[a, b]).next_u64());
        if a != b {
            prop_assert_ne!(x, rng::stream(seed, &[b, a]).next_u64());
        }
    }
}
