//! Interaction logs, per-user histories and the user-level evaluation split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const DEFAULT_MIN_HISTORY_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: usize,
    pub timestamp: u64,
}

/// Loaded interactions plus the catalog size they were validated against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interactions {
    pub rows: Vec<Interaction>,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: u64,
    pub items: Vec<usize>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A held-out user: the first part of the history is model input, the rest is ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalUser {
    pub user_id: u64,
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<UserHistory>,
    pub valid: Vec<EvalUser>,
    pub test: Vec<EvalUser>,
    /// Held-out users whose history is too short to leave a non-empty target set.
    pub excluded_eval_users: usize,
}

impl DatasetSplit {
    pub fn train_users(&self) -> Vec<u64> {
        self.train.iter().map(|h| h.user_id).collect()
    }

    pub fn valid_users(&self) -> Vec<u64> {
        self.valid.iter().map(|u| u.user_id).collect()
    }

    pub fn test_users(&self) -> Vec<u64> {
        self.test.iter().map(|u| u.user_id).collect()
    }
}

/// Parses a `user<TAB>item<TAB>timestamp` file. Lines starting with `#` and blank lines are skipped.
pub fn load_interactions(path: impl AsRef<Path>, n_items_hint: Option<usize>) -> Result<Interactions> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, n_items_hint).map_err(|(line, msg)| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })
}

fn parse_interactions(text: &str, n_items_hint: Option<usize>) -> Result<Interactions, (usize, String)> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err((line_no, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let user_id: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| (line_no, format!("bad user id {:?}", fields[0])))?;
        let item_id: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| (line_no, format!("bad item id {:?}", fields[1])))?;
        let timestamp: u64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| (line_no, format!("bad timestamp {:?}", fields[2])))?;
        if let Some(n) = n_items_hint {
            if item_id >= n {
                return Err((line_no, format!("item id {item_id} out of range for catalog of {n}")));
            }
        }
        rows.push(Interaction {
            user_id,
            item_id,
            timestamp,
        });
    }
    let n_items = match n_items_hint {
        Some(n) => n,
        None => rows.iter().map(|r| r.item_id + 1).max().unwrap_or(0),
    };
    Ok(Interactions { rows, n_items })
}

pub fn write_interactions(path: impl AsRef<Path>, rows: &[Interaction]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(rows.len() * 16);
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\n", r.user_id, r.item_id, r.timestamp));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Groups interactions per user in ascending user-id order.
///
/// Each history is sorted by timestamp; equal timestamps keep input order.
/// Returns the retained histories and the number of users dropped for being
/// shorter than `min_history_len`.
pub fn build_histories(rows: &[Interaction], min_history_len: usize) -> (Vec<UserHistory>, usize) {
    let mut per_user: BTreeMap<u64, Vec<(u64, usize)>> = BTreeMap::new();
    for r in rows {
        per_user.entry(r.user_id).or_default().push((r.timestamp, r.item_id));
    }
    let mut dropped = 0;
    let mut out = Vec::with_capacity(per_user.len());
    for (user_id, mut events) in per_user {
        if events.len() < min_history_len.max(1) {
            dropped += 1;
            continue;
        }
        // stable: ties keep file order
        events.sort_by_key(|&(ts, _)| ts);
        out.push(UserHistory {
            user_id,
            items: events.into_iter().map(|(_, item)| item).collect(),
        });
    }
    (out, dropped)
}

/// Number of leading items used as evaluation context: ⌈0.8·t⌉.
pub fn context_len(t: usize) -> usize {
    (4 * t).div_ceil(5)
}

/// Splits users 8:1:1 after a seeded shuffle and cuts held-out histories 80/20.
pub fn split_users(histories: &[UserHistory], seed: u64) -> Result<DatasetSplit> {
    let n = histories.len();
    if n < 10 {
        return Err(Error::invalid(format!("need at least 10 users to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_valid = ((n as f64) * 0.1).round() as usize;
    let n_test = n_valid;
    let n_train = n - n_valid - n_test;

    let mut excluded = 0;
    let mut to_eval = |idx: &[usize]| -> Vec<EvalUser> {
        let mut users = Vec::with_capacity(idx.len());
        for &i in idx {
            let h = &histories[i];
            let cut = context_len(h.len());
            if cut == 0 || cut >= h.len() {
                excluded += 1;
                continue;
            }
            users.push(EvalUser {
                user_id: h.user_id,
                context: h.items[..cut].to_vec(),
                targets: h.items[cut..].to_vec(),
            });
        }
        users
    };
    let valid = to_eval(&order[n_train..n_train + n_valid]);
    let test = to_eval(&order[n_train + n_valid..]);
    let train = order[..n_train].iter().map(|&i| histories[i].clone()).collect();
    Ok(DatasetSplit {
        train,
        valid,
        test,
        excluded_eval_users: excluded,
    })
}

/// Parameters of the synthetic Markov corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of stepping to the item's designated successor.
    pub follow_prob: f64,
}

impl SynthConfig {
    pub fn new(n_users: usize, n_items: usize, seed: u64) -> Self {
        SynthConfig {
            n_users,
            n_items,
            seed,
            min_len: 6,
            max_len: 10,
            follow_prob: 0.8,
        }
    }
}

/// Successor rule of the synthetic corpus: a single seeded cycle over all items.
pub fn successor_map(n_items: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let mut cycle: Vec<usize> = (0..n_items).collect();
    cycle.shuffle(&mut rng);
    let mut succ = vec![0; n_items];
    for i in 0..n_items {
        succ[cycle[i]] = cycle[(i + 1) % n_items];
    }
    succ
}

/// Generates Markov-chain sequences: each item moves to its successor with
/// probability `follow_prob`, otherwise to a uniformly chosen other item.
pub fn synthesize_corpus(n_users: usize, n_items: usize, rule_seed: u64) -> Result<Vec<Interaction>> {
    synthesize_corpus_with(&SynthConfig::new(n_users, n_items, rule_seed))
}

pub fn synthesize_corpus_with(cfg: &SynthConfig) -> Result<Vec<Interaction>> {
    if cfg.n_items < 2 {
        return Err(Error::invalid("synthetic corpus needs at least 2 items"));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::invalid("synthetic history lengths must satisfy 1 <= min_len <= max_len"));
    }
    let succ = successor_map(cfg.n_items, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for user in 0..cfg.n_users {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut item = rng.random_range(0..cfg.n_items);
        for ts in 0..len {
            rows.push(Interaction {
                user_id: user as u64,
                item_id: item,
                timestamp: ts as u64,
            });
            item = if rng.random::<f64>() < cfg.follow_prob {
                succ[item]
            } else {
                // uniform over the items other than the successor
                let mut other = rng.random_range(0..cfg.n_items - 1);
                if other >= succ[item] {
                    other += 1;
                }
                other
            };
        }
    }
    Ok(rows)
}
