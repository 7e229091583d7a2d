//! Brute-force references for tests and the benchmark.
//!
//! Everything here is written with plain loops and size guards; none of it
//! calls into the code it is meant to check.

use crate::idtree::IdentifierTree;
use crate::model::Model;
use crate::{Error, Result};

pub const EXHAUSTIVE_MAX_ITEMS: usize = 4096;
pub const PARTITION_MAX_POINTS: usize = 12;

/// Scores every item by teacher-forced decoding of its identifier and sorts
/// by score descending, ties to the smaller item id.
pub fn exhaustive_rank(model: &Model, tree: &IdentifierTree, history: &[usize]) -> Result<Vec<(usize, f64)>> {
    let n = tree.n_items();
    if n > EXHAUSTIVE_MAX_ITEMS {
        return Err(Error::invalid(format!("exhaustive ranking limited to {EXHAUSTIVE_MAX_ITEMS} items, got {n}")));
    }
    let enc = model.encode(history)?;
    let l = tree.depth();
    let mut scored = Vec::with_capacity(n);
    for chunk_start in (0..n).step_by(256) {
        let items: Vec<usize> = (chunk_start..n.min(chunk_start + 256)).collect();
        let paths: Vec<Vec<usize>> = items.iter().map(|&i| tree.item_paths()[i].clone()).collect();
        let y = model.decode_batch(&enc, &paths)?;
        for (b, &item) in items.iter().enumerate() {
            let path = &paths[b];
            let mut total = 0.0;
            for step in 0..l {
                let cands = tree.children_of_prefix(&path[..step])?;
                let mut at = usize::MAX;
                for (j, &c) in cands.iter().enumerate() {
                    if c == path[step] {
                        at = j;
                    }
                }
                let lp = model.step_log_probs(y.row(b * (l + 1) + step), cands)?;
                total += lp[at];
            }
            scored.push((item, total));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// Best size-balanced two-way split by exhaustive enumeration.
///
/// Returns labels in {0, 1} and the within-cluster sum of squares.
pub fn brute_balanced_partition(points: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = points.len();
    if !(2..=PARTITION_MAX_POINTS).contains(&n) {
        return Err(Error::invalid(format!("brute partition needs 2..={PARTITION_MAX_POINTS} points")));
    }
    let half = n / 2;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != half {
            continue;
        }
        let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        let mut sse = 0.0;
        for cluster in 0..2 {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| labels[i] == cluster).map(|i| &points[i]).collect();
            let dim = points[0].len();
            let mut centre = vec![0.0; dim];
            for m in &members {
                for j in 0..dim {
                    centre[j] += m[j];
                }
            }
            for c in centre.iter_mut() {
                *c /= members.len() as f64;
            }
            for m in &members {
                for j in 0..dim {
                    sse += (m[j] - centre[j]) * (m[j] - centre[j]);
                }
            }
        }
        if best.as_ref().is_none_or(|b| sse < b.1) {
            best = Some((labels, sse));
        }
    }
    Ok(best.expect("at least one balanced split"))
}

/// `(hr, recall, ndcg)` at K with naive loops.
pub fn naive_metrics(retrieved: &[usize], positives: &[usize], k: usize) -> Result<(f64, f64, f64)> {
    let mut unique: Vec<usize> = Vec::new();
    for &p in positives {
        if !unique.contains(&p) {
            unique.push(p);
        }
    }
    if unique.is_empty() || k == 0 || k > retrieved.len() {
        return Err(Error::invalid("naive metrics need positives and K within the list"));
    }
    let mut hit_count = 0;
    let mut dcg = 0.0;
    for rank in 0..k {
        let mut relevant = false;
        for &p in &unique {
            if retrieved[rank] == p {
                relevant = true;
            }
        }
        if relevant {
            hit_count += 1;
            dcg += 1.0 / ((rank as f64 + 2.0).ln() / 2f64.ln());
        }
    }
    let mut idcg = 0.0;
    let mut rank = 0;
    while rank < k && rank < unique.len() {
        idcg += 1.0 / ((rank as f64 + 2.0).ln() / 2f64.ln());
        rank += 1;
    }
    let hr = if hit_count > 0 { 1.0 } else { 0.0 };
    Ok((hr, hit_count as f64 / unique.len() as f64, dcg / idcg))
}
