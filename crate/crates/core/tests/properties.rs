use std::collections::BTreeSet;

use proptest::prelude::*;

use treeret::corpus::{build_histories, context_len, split_users, synthesize_corpus};
use treeret::embeddings::random_embeddings;
use treeret::idtree::{IdentifierTree, TreeMode};
use treeret::metrics::{hr_at_k, ndcg_at_k, recall_at_k, EvalRecord};
use treeret::oracles::naive_metrics;

fn record() -> impl Strategy<Value = EvalRecord> {
    (1usize..40, prop::collection::vec(0usize..60, 1..12)).prop_flat_map(|(len, positives)| {
        Just((0..60usize).collect::<Vec<_>>())
            .prop_shuffle()
            .prop_map(move |items| EvalRecord {
                user_id: 0,
                retrieved: items[..len].to_vec(),
                positives: positives.clone(),
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_users(n_users in 10usize..120, seed in 0u64..1000) {
        let rows = synthesize_corpus(n_users, 30, seed).unwrap();
        let (hist, dropped) = build_histories(&rows, 5);
        prop_assert_eq!(dropped + hist.len(), n_users);
        let split = split_users(&hist, seed).unwrap();
        let train: BTreeSet<u64> = split.train_users().into_iter().collect();
        let valid: BTreeSet<u64> = split.valid_users().into_iter().collect();
        let test: BTreeSet<u64> = split.test_users().into_iter().collect();
        prop_assert!(train.is_disjoint(&valid) && train.is_disjoint(&test) && valid.is_disjoint(&test));
        prop_assert_eq!(train.len() + valid.len() + test.len() + split.excluded_eval_users, hist.len());
        for u in split.valid.iter().chain(&split.test) {
            let h = hist.iter().find(|h| h.user_id == u.user_id).unwrap();
            prop_assert_eq!(u.context.len(), context_len(h.len()));
            prop_assert!(!u.targets.is_empty());
            let joined: Vec<usize> = u.context.iter().chain(&u.targets).copied().collect();
            prop_assert_eq!(&joined, &h.items);
        }
        prop_assert_eq!(split_users(&hist, seed).unwrap(), split);
    }

    #[test]
    fn metrics_are_bounded_and_monotone(r in record()) {
        let mut prev = (0.0, 0.0);
        for k in 1..=r.retrieved.len() {
            let (hr, rc, nd) = (hr_at_k(&r, k).unwrap(), recall_at_k(&r, k).unwrap(), ndcg_at_k(&r, k).unwrap());
            for v in [hr, rc, nd] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!(hr >= prev.0 && rc >= prev.1);
            prop_assert!(rc <= hr);
            prev = (hr, rc);
        }
    }

    #[test]
    fn metrics_match_naive_loops(r in record(), k_frac in 0.0f64..1.0) {
        let k = 1 + ((r.retrieved.len() - 1) as f64 * k_frac) as usize;
        let (hr, rc, nd) = naive_metrics(&r.retrieved, &r.positives, k).unwrap();
        prop_assert!((hr_at_k(&r, k).unwrap() - hr).abs() <= 1e-12);
        prop_assert!((recall_at_k(&r, k).unwrap() - rc).abs() <= 1e-12);
        prop_assert!((ndcg_at_k(&r, k).unwrap() - nd).abs() <= 1e-12);
    }

    #[test]
    fn trees_are_sound_in_both_modes(n in 1usize..300, k in 2usize..10, seed in 0u64..100, balanced in any::<bool>()) {
        let mode = if balanced { TreeMode::Balanced } else { TreeMode::Unbalanced };
        let tree = IdentifierTree::build(&random_embeddings(n, 4, seed).unwrap(), k, seed, mode).unwrap();
        tree.validate().unwrap();
        let mut ids = BTreeSet::new();
        for item in 0..n {
            let id = tree.item_to_identifier(item).unwrap();
            prop_assert_eq!(id.len(), tree.depth());
            prop_assert_eq!(tree.identifier_to_item(id).unwrap(), item);
            ids.insert(id.to_vec());
        }
        prop_assert_eq!(ids.len(), n);
        let back = IdentifierTree::from_json(&tree.to_json()).unwrap();
        prop_assert_eq!(back, tree.clone());
        if balanced {
            let sizes = tree.subtree_sizes();
            for t in n..tree.n_tokens() {
                let s: Vec<usize> = tree.children(t).iter().map(|&c| sizes[c]).collect();
                prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
            }
        }
    }
}
