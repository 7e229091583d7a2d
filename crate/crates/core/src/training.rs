//! Losses, negative sampling and the training loop.
//!
//! The objective is `L_gen + λa·L_ali + λr·L_rank`:
//!
//! - `L_gen`: teacher-forced cross-entropy over legal children at each step.
//! - `L_ali`: infoNCE pulling each token toward its parent, with the other
//!   tokens of the batch (minus parent and children) as negatives.
//! - `L_rank`: hinge over every pair of the target and its sampled negatives,
//!   with margin `β` times the difference in shared-prefix length.
//!
//! Weight decay is applied by the optimizer, not folded into the loss.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, Tensor, Var};
use crate::corpus::{EvalUser, UserHistory};
use crate::idtree::IdentifierTree;
use crate::inference::retrieve_topn;
use crate::metrics::{recall_at_k, EvalRecord};
use crate::model::{Ctx, Model};
use crate::{Error, Result};

/// Examples per gradient shard; fixed so results do not depend on thread count.
const SHARD_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_a: f64,
    pub lambda_r: f64,
    pub tau: f64,
    pub q: usize,
    pub beta: f64,
    pub l2_weight: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub min_history_len: usize,
    /// Beam size used for the per-epoch validation pass.
    pub valid_beam: usize,
    /// Validation metric is Recall at this cutoff (capped at the catalog size).
    pub valid_k: usize,
    pub single_threaded: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_a: 0.05,
            lambda_r: 0.05,
            tau: 0.07,
            q: 4,
            beta: 0.001,
            l2_weight: 1e-6,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 20,
            patience: 5,
            seed: 0,
            min_history_len: crate::corpus::DEFAULT_MIN_HISTORY_LEN,
            valid_beam: 50,
            valid_k: 50,
            single_threaded: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_a >= 0.0
            && self.lambda_r >= 0.0
            && self.tau > 0.0
            && self.q >= 1
            && self.beta > 0.0
            && self.l2_weight >= 0.0
            && self.lr > 0.0
            && self.batch_size >= 1
            && self.min_history_len >= 2
            && self.valid_beam >= 1
            && self.valid_k >= 1;
        if !ok {
            return Err(Error::invalid(format!("inconsistent training config {self:?}")));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.l2_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub user_id: u64,
    pub context: Vec<usize>,
    pub target: usize,
    pub identifier: Vec<usize>,
}

/// Sliding next-item examples: `items[..j] → items[j]` for `j ≥ min_history_len − 1`.
pub fn make_examples(
    histories: &[UserHistory],
    tree: &IdentifierTree,
    min_history_len: usize,
    max_history_len: usize,
) -> Result<Vec<TrainingExample>> {
    if min_history_len < 2 || max_history_len == 0 {
        return Err(Error::invalid("examples need min_history_len >= 2 and max_history_len >= 1"));
    }
    let mut out = Vec::new();
    for h in histories {
        for j in (min_history_len - 1)..h.items.len() {
            let start = j.saturating_sub(max_history_len);
            let target = h.items[j];
            out.push(TrainingExample {
                user_id: h.user_id,
                context: h.items[start..j].to_vec(),
                target,
                identifier: tree.item_to_identifier(target)?.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Negatives for one target, each diverging from it after `prefix_lens[i]` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    pub identifiers: Vec<Vec<usize>>,
    pub prefix_lens: Vec<usize>,
}

/// Samples up to `q` negatives with distinct shared-prefix lengths in `0..=l−2`.
///
/// Only levels where the target has a sibling are eligible; with fewer
/// eligible levels than `q` the set shrinks.
pub fn sample_ranking_negatives<R: Rng>(
    tree: &IdentifierTree,
    positive: &[usize],
    q: usize,
    rng: &mut R,
) -> Result<NegativeSet> {
    let l = tree.depth();
    if q == 0 {
        return Err(Error::invalid("q must be at least 1"));
    }
    let mut legal = Vec::new();
    for p in 0..l.saturating_sub(1) {
        if tree.children_of_prefix(&positive[..p])?.len() > 1 {
            legal.push(p);
        }
    }
    if legal.is_empty() {
        return Err(Error::invalid("no level with a sibling to diverge at"));
    }
    let m = q.min(legal.len());
    let mut chosen: Vec<usize> = index::sample(rng, legal.len(), m).into_iter().map(|i| legal[i]).collect();
    chosen.sort_unstable();
    let mut identifiers = Vec::with_capacity(m);
    for &p in &chosen {
        let mut id = positive[..p].to_vec();
        let siblings: Vec<usize> = tree
            .children_of_prefix(&id)?
            .iter()
            .copied()
            .filter(|&c| c != positive[p])
            .collect();
        id.push(siblings[rng.random_range(0..siblings.len())]);
        while id.len() < l {
            let cands = tree.children_of_prefix(&id)?;
            let next = if cands.len() == 1 {
                cands[0]
            } else {
                cands[rng.random_range(0..cands.len())]
            };
            id.push(next);
        }
        identifiers.push(id);
    }
    Ok(NegativeSet {
        identifiers,
        prefix_lens: chosen,
    })
}

pub fn shared_prefix_len(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// One hinge term: `lo` must score below `hi` by at least `margin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankPair {
    pub lo: usize,
    pub hi: usize,
    pub margin: f64,
}

/// All pairs of `nums` (shared-prefix lengths against the target) with
/// different values, oriented so `hi` shares more of the target.
pub fn ranking_pairs(nums: &[usize], beta: f64) -> Vec<RankPair> {
    let mut pairs = Vec::new();
    for i in 0..nums.len() {
        for j in i + 1..nums.len() {
            let (lo, hi) = match nums[i].cmp(&nums[j]) {
                std::cmp::Ordering::Less => (i, j),
                std::cmp::Ordering::Greater => (j, i),
                std::cmp::Ordering::Equal => continue,
            };
            pairs.push(RankPair {
                lo,
                hi,
                margin: beta * (nums[hi] - nums[lo]) as f64,
            });
        }
    }
    pairs
}

/// Hinge loss over [`ranking_pairs`] for plain similarity scores.
pub fn ranking_loss_value(scores: &[f64], nums: &[usize], beta: f64) -> f64 {
    ranking_pairs(nums, beta)
        .iter()
        .map(|p| (scores[p.lo] - scores[p.hi] + p.margin).max(0.0))
        .sum()
}

/// An infoNCE anchor: `token` is pulled toward `positive` against `negatives`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anchor {
    pub token: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Anchors over the pool of identifier tokens plus their parents.
///
/// Every non-root pool token is an anchor; its negatives are the pool minus
/// itself, its parent and its children.
pub fn alignment_anchors(tree: &IdentifierTree, identifiers: &[&[usize]]) -> Result<Vec<Anchor>> {
    let root = tree.start_token();
    let mut pool = BTreeSet::new();
    for id in identifiers {
        for &t in *id {
            pool.insert(t);
            pool.insert(tree.parent(t));
        }
    }
    let mut anchors = Vec::new();
    for &j in &pool {
        if j == root {
            continue;
        }
        let parent = tree.parent(j);
        let kids = tree.children(j);
        let negatives = pool
            .iter()
            .copied()
            .filter(|&t| t != j && t != parent && !kids.contains(&t))
            .collect();
        anchors.push(Anchor {
            token: j,
            positive: parent,
            negatives,
        });
    }
    if anchors.is_empty() {
        return Err(Error::invalid("no alignment anchor in batch"));
    }
    Ok(anchors)
}

/// Mean infoNCE over `anchors`, rows taken from `table`.
///
/// The positive term is part of the denominator, so an anchor without
/// negatives contributes exactly zero.
pub fn alignment_loss_graph(g: &mut Graph, table: Var, anchors: &[Anchor], tau: f64) -> Result<Var> {
    if anchors.is_empty() {
        return Err(Error::invalid("no alignment anchor"));
    }
    let mut tokens: Vec<usize> = anchors
        .iter()
        .flat_map(|a| std::iter::once(a.token).chain(std::iter::once(a.positive)).chain(a.negatives.iter().copied()))
        .collect();
    tokens.sort_unstable();
    tokens.dedup();
    let slot = |t: usize| tokens.binary_search(&t).expect("token in pool");
    let p = tokens.len();
    let rows = g.gather_rows(table, &tokens)?;
    let unit = g.normalize_rows(rows)?;
    let unit_t = g.transpose(unit)?;
    let cos = g.matmul(unit, unit_t)?;
    let cos = g.reshape(cos, vec![p * p])?;
    let mut picks = Vec::new();
    let mut segments = Vec::new();
    for a in anchors {
        let row = slot(a.token) * p;
        segments.push((picks.len(), 1 + a.negatives.len()));
        picks.push(row + slot(a.positive));
        picks.extend(a.negatives.iter().map(|&n| row + slot(n)));
    }
    let logits = g.pick(cos, &picks)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let ls = g.segment_log_softmax(logits, &segments)?;
    let firsts: Vec<usize> = segments.iter().map(|s| s.0).collect();
    let pos = g.pick(ls, &firsts)?;
    let total = g.sum_all(pos)?;
    g.scale(total, -1.0 / anchors.len() as f64)
}

pub fn alignment_loss(ctx: &mut Ctx, model: &Model, tree: &IdentifierTree, examples: &[&TrainingExample], tau: f64) -> Result<Var> {
    let ids: Vec<&[usize]> = examples.iter().map(|e| e.identifier.as_slice()).collect();
    let anchors = alignment_anchors(tree, &ids)?;
    let table = ctx.p(model.emb_id())?;
    alignment_loss_graph(ctx.g, table, &anchors, tau)
}

/// Summed (not averaged) generation and ranking losses for `examples`.
pub struct SummedLosses {
    pub gen: Var,
    pub rank: Option<Var>,
}

pub fn generation_and_ranking(
    ctx: &mut Ctx,
    model: &Model,
    tree: &IdentifierTree,
    examples: &[&TrainingExample],
    negatives: Option<&[NegativeSet]>,
    beta: f64,
) -> Result<SummedLosses> {
    let l = tree.depth();
    let start = tree.start_token();
    let contexts: Vec<&[usize]> = examples.iter().map(|e| e.context.as_slice()).collect();
    let mut enc = model.encode_graph(ctx, &contexts)?;

    let mut inputs = Vec::new();
    let mut enc_index = Vec::new();
    let mut nums = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        if e.identifier.len() != l {
            return Err(Error::invalid(format!("identifier of length {} in a depth-{l} tree", e.identifier.len())));
        }
        inputs.push(std::iter::once(start).chain(e.identifier.iter().copied()).collect::<Vec<_>>());
        enc_index.push(i);
    }
    if let Some(negs) = negatives {
        if negs.len() != examples.len() {
            return Err(Error::invalid("one negative set per example required"));
        }
        for (i, (e, n)) in examples.iter().zip(negs).enumerate() {
            let mut row = vec![l];
            for id in &n.identifiers {
                inputs.push(std::iter::once(start).chain(id.iter().copied()).collect());
                enc_index.push(i);
                row.push(shared_prefix_len(id, &e.identifier));
            }
            nums.push(row);
        }
    }
    let y = model.decode_graph(ctx, &mut enc, &enc_index, &inputs)?;
    let stride = l + 1;

    let mut row_idx = Vec::new();
    let mut cand_tok = Vec::new();
    let mut segments = Vec::new();
    let mut targets = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        for step in 0..l {
            let cands = tree.children_of_prefix(&e.identifier[..step])?;
            if cands.len() < 2 {
                continue;
            }
            let at = cands
                .iter()
                .position(|&c| c == e.identifier[step])
                .ok_or_else(|| Error::invalid("identifier leaves the tree"))?;
            segments.push((cand_tok.len(), cands.len()));
            targets.push(cand_tok.len() + at);
            for &c in cands {
                row_idx.push(i * stride + step);
                cand_tok.push(c);
            }
        }
    }
    let gen = if segments.is_empty() {
        ctx.g.constant(Tensor::scalar(0.0))?
    } else {
        let rows = ctx.g.gather_rows(y, &row_idx)?;
        let table = ctx.p(model.emb_id())?;
        let cand = ctx.g.gather_rows(table, &cand_tok)?;
        let logits = ctx.g.row_dot(rows, cand)?;
        let ls = ctx.g.segment_log_softmax(logits, &segments)?;
        let picked = ctx.g.pick(ls, &targets)?;
        let s = ctx.g.sum_all(picked)?;
        ctx.g.scale(s, -1.0)?
    };

    let rank = if negatives.is_some() {
        let b = examples.len();
        let n_seq = inputs.len();
        let t = enc.t_max;
        let mut px = vec![0.0; b * b * t];
        for (i, &len) in enc.lens.iter().enumerate() {
            for p in 0..len {
                px[i * b * t + i * t + p] = 1.0 / len as f64;
            }
        }
        let mut py = vec![0.0; n_seq * n_seq * stride];
        for s in 0..n_seq {
            for r in 0..stride {
                py[s * n_seq * stride + s * stride + r] = 1.0 / stride as f64;
            }
        }
        let px = ctx.g.constant(Tensor::new(vec![b, b * t], px)?)?;
        let py = ctx.g.constant(Tensor::new(vec![n_seq, n_seq * stride], py)?)?;
        let z_x = ctx.g.matmul(px, enc.x)?;
        let z_y = ctx.g.matmul(py, y)?;
        let w_s = ctx.p(model.w_s_id())?;
        let u = ctx.g.matmul(z_x, w_s)?;
        let u = ctx.g.gather_rows(u, &enc_index)?;
        let bil = ctx.g.row_dot(u, z_y)?;
        let s = ctx.g.sigmoid(bil)?;

        // sequence index of candidate j of example i
        let mut seq_of = Vec::with_capacity(b);
        let mut next = b;
        for row in &nums {
            let mut v = vec![seq_of.len()];
            for _ in 1..row.len() {
                v.push(next);
                next += 1;
            }
            seq_of.push(v);
        }
        let (mut lo, mut hi, mut margins) = (Vec::new(), Vec::new(), Vec::new());
        for (row, seqs) in nums.iter().zip(&seq_of) {
            for p in ranking_pairs(row, beta) {
                lo.push(seqs[p.lo]);
                hi.push(seqs[p.hi]);
                margins.push(p.margin);
            }
        }
        if lo.is_empty() {
            Some(ctx.g.constant(Tensor::scalar(0.0))?)
        } else {
            let n = margins.len();
            let a = ctx.g.pick(s, &lo)?;
            let c = ctx.g.pick(s, &hi)?;
            let diff = ctx.g.sub(a, c)?;
            let diff = ctx.g.add_const(diff, &Tensor::new(vec![n], margins)?)?;
            let hinge = ctx.g.relu(diff)?;
            Some(ctx.g.sum_all(hinge)?)
        }
    } else {
        None
    };
    Ok(SummedLosses { gen, rank })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub gen: f64,
    pub ali: f64,
    pub rank: f64,
    pub total: f64,
}

/// Batch objective on one tape: `mean L_gen + λa·L_ali + λr·mean L_rank`.
pub fn total_loss(
    ctx: &mut Ctx,
    model: &Model,
    tree: &IdentifierTree,
    examples: &[&TrainingExample],
    negatives: Option<&[NegativeSet]>,
    cfg: &TrainConfig,
) -> Result<(Var, LossParts)> {
    let b = examples.len() as f64;
    let negatives = if cfg.lambda_r > 0.0 { negatives } else { None };
    let parts = generation_and_ranking(ctx, model, tree, examples, negatives, cfg.beta)?;
    let mut out = LossParts::default();
    let mut total = ctx.g.scale(parts.gen, 1.0 / b)?;
    out.gen = ctx.g.value(total).item();
    if let Some(r) = parts.rank {
        out.rank = ctx.g.value(r).item() / b;
        let r = ctx.g.scale(r, cfg.lambda_r / b)?;
        total = ctx.g.add(total, r)?;
    }
    if cfg.lambda_a > 0.0 {
        let a = alignment_loss(ctx, model, tree, examples, cfg.tau)?;
        out.ali = ctx.g.value(a).item();
        let a = ctx.g.scale(a, cfg.lambda_a)?;
        total = ctx.g.add(total, a)?;
    }
    out.total = ctx.g.value(total).item();
    Ok((total, out))
}

/// Counter-based early stopping on a metric where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records one evaluation; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_gen: f64,
    pub loss_ali: f64,
    pub loss_rank: f64,
    pub loss_total: f64,
    pub valid_recall_at_50: f64,
    pub seconds: f64,
}

/// Where [`train`] writes its artifacts; all optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best_valid_recall: f64,
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
    pub best_model: Model,
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ c.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean Recall@K over `users` with beam retrieval.
pub fn validation_recall(model: &Model, tree: &IdentifierTree, users: &[EvalUser], beam: usize, k: usize) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::invalid("empty validation split"));
    }
    let k = k.min(tree.n_items());
    let queries: Vec<(u64, &[usize])> = users.iter().map(|u| (u.user_id, u.context.as_slice())).collect();
    let results = retrieve_topn(model, tree, &queries, beam.max(k), k)?;
    let mut sum = 0.0;
    for (u, r) in users.iter().zip(results) {
        sum += recall_at_k(
            &EvalRecord {
                user_id: u.user_id,
                retrieved: r.items,
                positives: u.targets.clone(),
            },
            k,
        )?;
    }
    Ok(sum / users.len() as f64)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged { step, what },
        other => other,
    }
}

/// One optimizer step on `batch`. Returns the batch loss components.
pub fn train_step(
    model: &mut Model,
    tree: &IdentifierTree,
    batch: &[&TrainingExample],
    negatives: Option<&[NegativeSet]>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossParts> {
    let b = batch.len() as f64;
    let use_rank = cfg.lambda_r > 0.0 && negatives.is_some();
    let n_shards = batch.len().div_ceil(SHARD_SIZE);
    let shard_ids: Vec<usize> = (0..=n_shards).collect();
    let model_ref: &Model = model;
    let run = |shard: usize| -> Result<(Vec<Vec<f64>>, LossParts)> {
        let store = model_ref.store();
        let mut g = Graph::training(mix(cfg.seed, step as u64, shard as u64));
        let mut grads: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        let mut parts = LossParts::default();
        let mut ctx = Ctx::new(&mut g, store);
        let loss = if shard == n_shards {
            if cfg.lambda_a == 0.0 {
                return Ok((grads, parts));
            }
            let a = alignment_loss(&mut ctx, model_ref, tree, batch, cfg.tau)?;
            parts.ali = ctx.g.value(a).item();
            ctx.g.scale(a, cfg.lambda_a)?
        } else {
            let lo = shard * SHARD_SIZE;
            let hi = (lo + SHARD_SIZE).min(batch.len());
            let negs = if use_rank { negatives.map(|n| &n[lo..hi]) } else { None };
            let s = generation_and_ranking(&mut ctx, model_ref, tree, &batch[lo..hi], negs, cfg.beta)?;
            parts.gen = ctx.g.value(s.gen).item() / b;
            let mut total = ctx.g.scale(s.gen, 1.0 / b)?;
            if let Some(r) = s.rank {
                parts.rank = ctx.g.value(r).item() / b;
                let r = ctx.g.scale(r, cfg.lambda_r / b)?;
                total = ctx.g.add(total, r)?;
            }
            total
        };
        g.backward_into(loss, &mut grads)?;
        Ok((grads, parts))
    };
    let results: Vec<Result<(Vec<Vec<f64>>, LossParts)>> = if cfg.single_threaded {
        shard_ids.iter().map(|&s| run(s)).collect()
    } else {
        shard_ids.par_iter().map(|&s| run(s)).collect()
    };
    let mut parts = LossParts::default();
    let store = model.store_mut();
    store.zero_grad();
    for r in results {
        let (grads, p) = r.map_err(|e| diverged(step, e))?;
        parts.gen += p.gen;
        parts.ali += p.ali;
        parts.rank += p.rank;
        for (param, g) in store.params_mut().iter_mut().zip(grads) {
            for (dst, x) in param.grad.iter_mut().zip(g) {
                *dst += x;
            }
        }
    }
    parts.total = parts.gen + cfg.lambda_a * parts.ali + cfg.lambda_r * parts.rank;
    if !parts.total.is_finite() {
        return Err(Error::Diverged {
            step,
            what: "loss".into(),
        });
    }
    if store.params().iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::Diverged {
            step,
            what: "gradient".into(),
        });
    }
    store.adam_step(&cfg.adam());
    Ok(parts)
}

/// Epoch loop with per-epoch validation and early stopping.
///
/// `start_epoch` lets a resumed run continue numbering; the optimizer state
/// carried in `model` is used as is.
pub fn train(
    model: &mut Model,
    tree: &IdentifierTree,
    train_users: &[UserHistory],
    valid_users: &[EvalUser],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    start_epoch: usize,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.config().check_tree(tree)?;
    if cfg.lambda_r > 0.0 && tree.depth() < 2 {
        return Err(Error::invalid("ranking loss needs identifiers of length at least 2"));
    }
    let examples = make_examples(train_users, tree, cfg.min_history_len, model.config().max_history_len)?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut log_file = match &outputs.log {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_model = model.clone();
    let mut log = Vec::new();
    let mut step = model.store().step_count() as usize;
    let mut epochs_run = 0;
    for epoch in start_epoch + 1..=start_epoch + cfg.max_epochs {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0x7a11));
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let negatives = if cfg.lambda_r > 0.0 {
                Some(
                    batch
                        .iter()
                        .map(|e| sample_ranking_negatives(tree, &e.identifier, cfg.q, &mut rng))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let p = train_step(model, tree, &batch, negatives.as_deref(), cfg, step)?;
            step += 1;
            sums.gen += p.gen;
            sums.ali += p.ali;
            sums.rank += p.rank;
            sums.total += p.total;
            n_batches += 1;
        }
        let nb = n_batches as f64;
        let recall = validation_recall(model, tree, valid_users, cfg.valid_beam, cfg.valid_k)?;
        let entry = EpochLog {
            epoch,
            loss_gen: sums.gen / nb,
            loss_ali: sums.ali / nb,
            loss_rank: sums.rank / nb,
            loss_total: sums.total / nb,
            valid_recall_at_50: recall,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let (Some(f), Some(p)) = (log_file.as_mut(), outputs.log.as_ref()) {
            writeln!(f, "{}", serde_json::to_string(&entry).expect("log entry serializes")).map_err(|e| Error::io(p, e))?;
        }
        log.push(entry);
        epochs_run += 1;
        let (improved, stop) = stopper.update(epoch, recall);
        let manifest = [("epoch", epoch as u64), ("seed", cfg.seed)];
        if improved {
            best_model = model.clone();
            if let Some(p) = &outputs.best_checkpoint {
                model.save(p, &manifest, true)?;
            }
        }
        if let Some(p) = &outputs.last_checkpoint {
            model.save(p, &manifest, true)?;
        }
        if stop {
            break;
        }
    }
    Ok(TrainReport {
        best_epoch: stopper.best_epoch(),
        best_valid_recall: stopper.best().unwrap_or(0.0),
        epochs_run,
        log,
        best_model,
    })
}
