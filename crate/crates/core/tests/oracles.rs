use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treeret::embeddings::random_embeddings;
use treeret::idtree::{clustering_sse, constrained_kmeans, IdentifierTree, TreeMode, DEFAULT_KMEANS_ITERS};
use treeret::inference::constrained_beam_search;
use treeret::model::{Model, ModelConfig};
use treeret::oracles::{brute_balanced_partition, exhaustive_rank};

fn small_model(tree: &IdentifierTree, seed: u64) -> Model {
    let cfg = ModelConfig {
        n_heads: 2,
        dropout: 0.0,
        ..ModelConfig::for_tree(tree).with_dim(8)
    };
    Model::new(cfg, seed).unwrap()
}

#[test]
fn beam_matches_exhaustive_on_padded_trees() {
    // catalog sizes that force pass-through levels
    for (seed, (n, k)) in [(10, 3), (23, 4), (50, 8), (5, 4)].into_iter().enumerate() {
        let seed = seed as u64;
        let tree = IdentifierTree::build(&random_embeddings(n, 4, seed).unwrap(), k, seed, TreeMode::Unbalanced).unwrap();
        let model = small_model(&tree, seed);
        let hist = [0, n - 1, n / 2];
        let r = constrained_beam_search(&model, &tree, &hist, n, n).unwrap();
        let oracle = exhaustive_rank(&model, &tree, &hist).unwrap();
        assert_eq!(r.items, oracle.iter().map(|x| x.0).collect::<Vec<_>>());
        assert_eq!(r.scores, oracle.iter().map(|x| x.1).collect::<Vec<_>>());
        let mass: f64 = r.scores.iter().map(|s| s.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-9, "{mass}");
    }
}

#[test]
fn full_beam_top1_dominates_narrow_beams() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..10u64 {
        let n = 64;
        let tree = IdentifierTree::build(&random_embeddings(n, 4, seed).unwrap(), 4, seed, TreeMode::Balanced).unwrap();
        let model = small_model(&tree, seed + 50);
        let hist: Vec<usize> = (0..5).map(|_| rng.random_range(0..n)).collect();
        let best = constrained_beam_search(&model, &tree, &hist, n, 1).unwrap().scores[0];
        for b in [1, 2, 4, 8, 16] {
            let r = constrained_beam_search(&model, &tree, &hist, b, 1).unwrap();
            assert!(r.scores[0] <= best);
            assert!(r.expansions <= b * tree.k() * tree.depth());
        }
    }
}

#[test]
fn constrained_kmeans_near_brute_force_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut within_10 = 0;
    for _ in 0..50 {
        let n = 8;
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let labels = constrained_kmeans(&refs, 2, n / 2, n.div_ceil(2), rng.random(), DEFAULT_KMEANS_ITERS).unwrap();
        let sse = clustering_sse(&refs, &labels, 2);
        let (_, best) = brute_balanced_partition(&pts).unwrap();
        assert!(best <= sse + 1e-12, "oracle {best} above heuristic {sse}");
        if sse <= 1.1 * best + 1e-12 {
            within_10 += 1;
        }
    }
    assert_eq!(within_10, 50, "{within_10} of 50 within 10%");
}
