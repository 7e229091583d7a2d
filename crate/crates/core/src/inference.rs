//! Beam search restricted to identifier-tree paths.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::idtree::IdentifierTree;
use crate::model::Model;
use crate::{Error, Result};

pub const DEFAULT_BEAM: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub prefix: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub items: Vec<usize>,
    /// Log-probabilities, non-increasing.
    pub scores: Vec<f64>,
    /// Candidates scored by the model; pass-through steps are free.
    pub expansions: usize,
}

/// Score descending, then smaller last token, then lexicographic prefix.
pub fn beam_order(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.prefix.last().cmp(&b.prefix.last()))
        .then_with(|| a.prefix.cmp(&b.prefix))
}

pub fn constrained_beam_search(
    model: &Model,
    tree: &IdentifierTree,
    history: &[usize],
    beam: usize,
    top_n: usize,
) -> Result<RetrievalResult> {
    if top_n == 0 || top_n > tree.n_items() {
        return Err(Error::invalid(format!("top-n {top_n} outside 1..={}", tree.n_items())));
    }
    if beam < top_n {
        return Err(Error::invalid(format!("beam {beam} smaller than top-n {top_n}")));
    }
    model.config().check_tree(tree)?;
    let enc = model.encode(history)?;
    let mut hyps = vec![BeamHypothesis {
        prefix: Vec::new(),
        log_prob: 0.0,
    }];
    let mut expansions = 0;
    for _ in 0..tree.depth() {
        let mut next = Vec::with_capacity(hyps.len() * tree.k());
        let mut scored = Vec::new();
        for h in &hyps {
            let cands = tree.children_of_prefix(&h.prefix)?;
            if cands.len() == 1 {
                next.push(extend(h, cands[0], 0.0));
            } else {
                scored.push(h);
            }
        }
        if !scored.is_empty() {
            let prefixes: Vec<Vec<usize>> = scored.iter().map(|h| h.prefix.clone()).collect();
            let y = model.decode_batch(&enc, &prefixes)?;
            let rows = prefixes[0].len() + 1;
            for (i, h) in scored.iter().enumerate() {
                let cands = tree.children_of_prefix(&h.prefix)?;
                let lp = model.step_log_probs(y.row(i * rows + rows - 1), cands)?;
                expansions += cands.len();
                for (&c, l) in cands.iter().zip(lp) {
                    next.push(extend(h, c, l));
                }
            }
        }
        next.sort_by(beam_order);
        next.truncate(beam);
        hyps = next;
    }
    let mut items = Vec::with_capacity(top_n);
    let mut scores = Vec::with_capacity(top_n);
    for h in hyps.into_iter().take(top_n) {
        items.push(tree.identifier_to_item(&h.prefix)?);
        scores.push(h.log_prob);
    }
    Ok(RetrievalResult {
        items,
        scores,
        expansions,
    })
}

fn extend(h: &BeamHypothesis, token: usize, log_p: f64) -> BeamHypothesis {
    let mut prefix = Vec::with_capacity(h.prefix.len() + 1);
    prefix.extend_from_slice(&h.prefix);
    prefix.push(token);
    BeamHypothesis {
        prefix,
        log_prob: h.log_prob + log_p,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user_id: u64,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Runs beam search for every `(user_id, history)`; output order follows input order.
pub fn retrieve_topn(
    model: &Model,
    tree: &IdentifierTree,
    users: &[(u64, &[usize])],
    beam: usize,
    top_n: usize,
) -> Result<Vec<UserResult>> {
    model.config().check_tree(tree)?;
    users
        .par_iter()
        .map(|&(user_id, history)| {
            let r = constrained_beam_search(model, tree, history, beam, top_n)
                .map_err(|e| Error::invalid(format!("user {user_id}: {e}")))?;
            Ok(UserResult {
                user_id,
                items: r.items,
                scores: r.scores,
            })
        })
        .collect()
}

pub fn write_results(path: impl AsRef<Path>, results: &[UserResult]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for r in results {
        s.push_str(&serde_json::to_string(r).expect("result serializes"));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<UserResult>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::random_embeddings;
    use crate::idtree::TreeMode;
    use crate::model::ModelConfig;

    fn setup(n: usize, k: usize) -> (IdentifierTree, Model) {
        let tree = IdentifierTree::build(&random_embeddings(n, 4, 3).unwrap(), k, 3, TreeMode::Balanced).unwrap();
        let cfg = ModelConfig {
            n_heads: 2,
            ..ModelConfig::for_tree(&tree).with_dim(8)
        };
        (tree.clone(), Model::new(cfg, 11).unwrap())
    }

    #[test]
    fn beam_one_is_greedy() {
        let (tree, model) = setup(16, 2);
        let hist = [3, 9, 1];
        let r = constrained_beam_search(&model, &tree, &hist, 1, 1).unwrap();
        let enc = model.encode(&hist).unwrap();
        let mut prefix = Vec::new();
        for i in 0..tree.depth() {
            let cands = tree.children_of_prefix(&prefix).unwrap();
            let y = model.decode(&enc, &prefix).unwrap();
            let lp = model.step_log_probs(y.y.row(i), cands).unwrap();
            let best = (0..cands.len())
                .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(cands[b].cmp(&cands[a])))
                .unwrap();
            prefix.push(cands[best]);
        }
        assert_eq!(r.items, vec![tree.identifier_to_item(&prefix).unwrap()]);
    }

    #[test]
    fn expansion_bound_and_validity() {
        let (tree, model) = setup(64, 4);
        assert_eq!(tree.depth(), 3);
        let r = constrained_beam_search(&model, &tree, &[1, 2, 3], 8, 8).unwrap();
        assert!(r.expansions <= 8 * 4 * 3, "{}", r.expansions);
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        let mut seen = r.items.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn argument_errors() {
        let (tree, model) = setup(8, 2);
        assert!(constrained_beam_search(&model, &tree, &[1], 4, 9).is_err());
        assert!(constrained_beam_search(&model, &tree, &[1], 2, 3).is_err());
        assert!(constrained_beam_search(&model, &tree, &[], 4, 2).is_err());
    }

    #[test]
    fn retrieval_is_repeatable_and_round_trips() {
        let (tree, model) = setup(16, 4);
        let h = [1usize, 2, 3];
        let users: Vec<(u64, &[usize])> = vec![(5, &h), (5, &h), (6, &h[..1])];
        let out = retrieve_topn(&model, &tree, &users, 6, 3).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], out[1]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        write_results(&p, &out).unwrap();
        assert_eq!(read_results(&p).unwrap(), out);
    }
}
