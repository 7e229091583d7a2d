//! Balanced k-ary identifier trees.
//!
//! Items are clustered recursively with capacity-constrained k-means until
//! every group holds at most `k` items. Each cluster becomes a token, each
//! item becomes a leaf whose token id equals its item id, and the root is
//! the start token (id `N`). Internal tokens get ids `N+1..M` in the order
//! they are first met when walking items by ascending id.
//!
//! When the catalog size is not a power of `k`, remainder handling can make
//! some leaves shallower than others. Those paths are right-padded by
//! repeating the leaf token; at a padded level the leaf is its own single
//! legal successor, so the step has probability one.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::ItemEmbeddings;
use crate::{Error, Result};

pub const TREE_FORMAT: &str = "treeret-tree/1";
pub const DEFAULT_KMEANS_ITERS: usize = 100;
/// Pairwise swap refinement is quadratic; larger groups only get single moves.
const SWAP_SEARCH_LIMIT: usize = 512;
/// Seeded restarts for subproblems small enough to afford them; the lowest SSE wins.
const SMALL_RESTARTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeMode {
    Balanced,
    Unbalanced,
}

impl std::str::FromStr for TreeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(TreeMode::Balanced),
            "unbalanced" => Ok(TreeMode::Unbalanced),
            other => Err(Error::invalid(format!("unknown tree mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TreeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TreeMode::Balanced => "balanced",
            TreeMode::Unbalanced => "unbalanced",
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if u < w {
                        pick = Some(i);
                        break;
                    }
                    u -= w;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // all remaining points coincide with a center
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

fn update_centroids(points: &[&[f64]], labels: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = points[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(labels) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                *dst = s / counts[c] as f64;
            }
        }
    }
}

/// Capacity-aware greedy assignment.
///
/// Point-cluster pairs are visited by ascending gap to the point's best
/// distance, then by distance, point index and cluster index. A pair is
/// accepted while the cluster is below `max_size` and the points left over
/// can still bring every cluster up to `min_size`.
fn capacity_assign(points: &[&[f64]], centroids: &[Vec<f64>], min_size: usize, max_size: usize) -> Vec<usize> {
    let n = points.len();
    let k = centroids.len();
    let mut pairs = Vec::with_capacity(n * k);
    for (i, p) in points.iter().enumerate() {
        let dists: Vec<f64> = centroids.iter().map(|c| sq_dist(p, c)).collect();
        let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        for (c, &d) in dists.iter().enumerate() {
            pairs.push((d - best, d, i, c));
        }
    }
    pairs.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut labels = vec![usize::MAX; n];
    let mut sizes = vec![0usize; k];
    let mut deficit = min_size * k;
    let mut unassigned = n;
    for &(_, _, i, c) in &pairs {
        if labels[i] != usize::MAX || sizes[c] >= max_size {
            continue;
        }
        if sizes[c] >= min_size && unassigned - 1 < deficit {
            continue;
        }
        if sizes[c] < min_size {
            deficit -= 1;
        }
        labels[i] = c;
        sizes[c] += 1;
        unassigned -= 1;
    }
    debug_assert!(labels.iter().all(|&l| l != usize::MAX));
    labels
}

/// Pairwise swaps and single moves that lower the cost against fixed centroids
/// without leaving the size bounds.
fn refine_assignment(
    points: &[&[f64]],
    centroids: &[Vec<f64>],
    labels: &mut [usize],
    min_size: usize,
    max_size: usize,
) {
    let n = points.len();
    let k = centroids.len();
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|p| centroids.iter().map(|c| sq_dist(p, c)).collect())
        .collect();
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for _ in 0..50 {
        let mut improved = false;
        for i in 0..n {
            let a = labels[i];
            if sizes[a] > min_size {
                let mut best = (0.0, a);
                for (c, &size) in sizes.iter().enumerate() {
                    let gain = dist[i][a] - dist[i][c];
                    if c != a && size < max_size && gain > best.0 + 1e-12 {
                        best = (gain, c);
                    }
                }
                if best.1 != a {
                    sizes[a] -= 1;
                    sizes[best.1] += 1;
                    labels[i] = best.1;
                    improved = true;
                    continue;
                }
            }
            if n > SWAP_SEARCH_LIMIT {
                continue;
            }
            for j in (i + 1)..n {
                let b = labels[j];
                if a == b {
                    continue;
                }
                let gain = dist[i][a] + dist[j][b] - dist[i][b] - dist[j][a];
                if gain > 1e-12 {
                    labels[i] = b;
                    labels[j] = a;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Within-cluster sum of squared distances to the cluster means.
pub fn clustering_sse(points: &[&[f64]], labels: &[usize], k: usize) -> f64 {
    let mut centroids = vec![vec![0.0; points[0].len()]; k];
    update_centroids(points, labels, &mut centroids);
    points.iter().zip(labels).map(|(p, &c)| sq_dist(p, &centroids[c])).sum()
}

/// k-means whose clusters must each hold between `min_size` and `max_size` points.
///
/// Seeded k-means++ initialization, then alternating capacity-constrained
/// assignment and centroid updates until the labels stop changing or
/// `max_iters` is reached. Small inputs are solved from several seeds and the
/// lowest-SSE labelling is kept.
pub fn constrained_kmeans(
    points: &[&[f64]],
    k: usize,
    min_size: usize,
    max_size: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} points")));
    }
    if min_size > max_size || min_size * k > n || max_size.saturating_mul(k) < n {
        return Err(Error::invalid(format!(
            "cluster sizes [{min_size}, {max_size}] infeasible for {n} points in {k} clusters"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let restarts = if n <= SWAP_SEARCH_LIMIT { SMALL_RESTARTS } else { 1 };
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let labels = constrained_lloyd(points, k, min_size, max_size, &mut rng, max_iters);
        let sse = clustering_sse(points, &labels, k);
        if best.as_ref().is_none_or(|b| sse < b.0) {
            best = Some((sse, labels));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn constrained_lloyd(
    points: &[&[f64]],
    k: usize,
    min_size: usize,
    max_size: usize,
    rng: &mut ChaCha8Rng,
    max_iters: usize,
) -> Vec<usize> {
    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut labels = capacity_assign(points, &centroids, min_size, max_size);
    refine_assignment(points, &centroids, &mut labels, min_size, max_size);
    for _ in 0..max_iters {
        update_centroids(points, &labels, &mut centroids);
        let mut next = capacity_assign(points, &centroids, min_size, max_size);
        refine_assignment(points, &centroids, &mut next, min_size, max_size);
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// Lloyd's k-means without size constraints; clusters may end up empty.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64, max_iters: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let nearest = |centroids: &[Vec<f64>], p: &[f64]| {
        let mut best = (f64::INFINITY, 0);
        for (c, centroid) in centroids.iter().enumerate() {
            let d = sq_dist(p, centroid);
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    };
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
    for _ in 0..max_iters {
        update_centroids(points, &labels, &mut centroids);
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(labels)
}

/// Item → token-path index over a k-ary prefix tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentifierTree {
    k: usize,
    depth: usize,
    n_items: usize,
    n_tokens: usize,
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
    item_paths: Vec<Vec<usize>>,
    leaf_depth: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeFile {
    format: String,
    k: usize,
    depth: usize,
    n_items: usize,
    n_tokens: usize,
    parent: Vec<usize>,
    item_paths: Vec<Vec<usize>>,
}

/// Structural summary used by `build-index` and the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeStats {
    pub n_items: usize,
    pub n_tokens: usize,
    pub k: usize,
    pub depth: usize,
    pub extra_token_rows: usize,
    pub internal_tokens: usize,
    pub mean_leaf_depth: f64,
}

struct Builder<'a> {
    emb: &'a ItemEmbeddings,
    k: usize,
    mode: TreeMode,
    seed: u64,
    calls: u64,
    raw_paths: Vec<Vec<usize>>,
}

impl Builder<'_> {
    fn next_seed(&mut self) -> u64 {
        self.calls += 1;
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.calls.wrapping_mul(0xBF58_476D_1CE4_E5B9))
    }

    fn split(&mut self, items: &[usize]) -> Result<Vec<Vec<usize>>> {
        let points: Vec<&[f64]> = items.iter().map(|&i| self.emb.row(i)).collect();
        let m = items.len();
        let seed = self.next_seed();
        let labels = match self.mode {
            TreeMode::Balanced => {
                let min = m / self.k;
                constrained_kmeans(&points, self.k, min, min + 1, seed, DEFAULT_KMEANS_ITERS)?
            }
            TreeMode::Unbalanced => kmeans(&points, self.k, seed, DEFAULT_KMEANS_ITERS)?,
        };
        let mut groups = vec![Vec::new(); self.k];
        for (&item, &c) in items.iter().zip(&labels) {
            groups[c].push(item);
        }
        groups.retain(|g| !g.is_empty());
        if groups.len() < 2 {
            // coincident points: fall back to contiguous chunks so recursion terminates
            let chunk = m.div_ceil(self.k);
            groups = items.chunks(chunk).map(|c| c.to_vec()).collect();
        }
        Ok(groups)
    }

    fn descend(&mut self, items: &[usize], prefix: &mut Vec<usize>) -> Result<()> {
        if items.len() <= self.k {
            for (j, &item) in items.iter().enumerate() {
                let mut path = prefix.clone();
                path.push(j);
                self.raw_paths[item] = path;
            }
            return Ok(());
        }
        for (c, group) in self.split(items)?.into_iter().enumerate() {
            prefix.push(c);
            self.descend(&group, prefix)?;
            prefix.pop();
        }
        Ok(())
    }
}

impl IdentifierTree {
    /// Builds the identifier tree over all items of `emb`.
    pub fn build(emb: &ItemEmbeddings, k: usize, seed: u64, mode: TreeMode) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("branch factor must be at least 2, got {k}")));
        }
        let n = emb.n_items();
        if n == 0 {
            return Err(Error::invalid("empty embedding matrix"));
        }
        let mut b = Builder {
            emb,
            k,
            mode,
            seed,
            calls: 0,
            raw_paths: vec![Vec::new(); n],
        };
        let all: Vec<usize> = (0..n).collect();
        b.descend(&all, &mut Vec::new())?;
        Self::from_cluster_paths(k, &b.raw_paths)
    }

    /// Assigns token ids to cluster-index paths (last entry: position among leaf siblings).
    fn from_cluster_paths(k: usize, raw: &[Vec<usize>]) -> Result<Self> {
        let n = raw.len();
        let root = n;
        let mut next = n + 1;
        let mut visited: HashMap<&[usize], usize> = HashMap::new();
        let mut parent = vec![root; n + 1];
        let mut paths = Vec::with_capacity(n);
        for (item, r) in raw.iter().enumerate() {
            let mut path = Vec::with_capacity(r.len());
            let mut up = root;
            for level in 0..r.len() - 1 {
                let id = *visited.entry(&r[..=level]).or_insert_with(|| {
                    let id = next;
                    next += 1;
                    parent.push(up);
                    id
                });
                path.push(id);
                up = id;
            }
            parent[item] = up;
            path.push(item);
            paths.push(path);
        }
        let n_tokens = next;
        let depth = paths.iter().map(Vec::len).max().unwrap_or(0);
        let leaf_depth = paths.iter().map(Vec::len).collect();
        for (item, p) in paths.iter_mut().enumerate() {
            p.resize(depth, item);
        }
        let children = children_from_parent(&parent, root);
        let tree = IdentifierTree {
            k,
            depth,
            n_items: n,
            n_tokens,
            parent,
            children,
            item_paths: paths,
            leaf_depth,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Identifier length `l` shared by every item.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Total token count `M`.
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn start_token(&self) -> usize {
        self.n_items
    }

    pub fn is_leaf(&self, token: usize) -> bool {
        token < self.n_items
    }

    /// Parent token; the root maps to itself.
    pub fn parent(&self, token: usize) -> usize {
        self.parent[token]
    }

    /// Structural children in ascending id order (empty for leaves).
    pub fn children(&self, token: usize) -> &[usize] {
        &self.children[token]
    }

    /// Unpadded path length of an item.
    pub fn leaf_depth(&self, item: usize) -> usize {
        self.leaf_depth[item]
    }

    pub fn item_paths(&self) -> &[Vec<usize>] {
        &self.item_paths
    }

    pub fn item_to_identifier(&self, item: usize) -> Result<&[usize]> {
        self.item_paths
            .get(item)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("item {item} out of range for catalog of {}", self.n_items)))
    }

    /// Follows `prefix` from the root and returns the node it ends on.
    fn walk(&self, prefix: &[usize]) -> Result<usize> {
        if prefix.len() > self.depth {
            return Err(Error::invalid(format!(
                "prefix of length {} exceeds identifier length {}",
                prefix.len(),
                self.depth
            )));
        }
        let mut node = self.start_token();
        for (pos, &tok) in prefix.iter().enumerate() {
            let ok = if self.is_leaf(node) {
                tok == node
            } else {
                tok < self.n_tokens && self.parent[tok] == node && tok != node
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "token {tok} at position {pos} is not a child of {node}"
                )));
            }
            node = tok;
        }
        Ok(node)
    }

    pub fn identifier_to_item(&self, identifier: &[usize]) -> Result<usize> {
        if identifier.len() != self.depth {
            return Err(Error::invalid(format!(
                "identifier has length {}, expected {}",
                identifier.len(),
                self.depth
            )));
        }
        let node = self.walk(identifier)?;
        if !self.is_leaf(node) {
            return Err(Error::invalid("identifier does not end at a leaf"));
        }
        Ok(node)
    }

    /// Legal next tokens after `prefix`, ascending.
    ///
    /// At a padded level this is the leaf itself; for a complete identifier it is empty.
    pub fn children_of_prefix(&self, prefix: &[usize]) -> Result<&[usize]> {
        let node = self.walk(prefix)?;
        if prefix.len() == self.depth {
            return Ok(&[]);
        }
        if self.is_leaf(node) {
            let path = &self.item_paths[node];
            return Ok(std::slice::from_ref(&path[path.len() - 1]));
        }
        Ok(&self.children[node])
    }

    /// Number of items below each token.
    pub fn subtree_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_tokens];
        for item in 0..self.n_items {
            let mut t = item;
            loop {
                sizes[t] += 1;
                if t == self.start_token() {
                    break;
                }
                t = self.parent[t];
            }
        }
        sizes
    }

    pub fn stats(&self) -> TreeStats {
        TreeStats {
            n_items: self.n_items,
            n_tokens: self.n_tokens,
            k: self.k,
            depth: self.depth,
            extra_token_rows: self.n_tokens - self.n_items,
            internal_tokens: self.n_tokens - self.n_items - 1,
            mean_leaf_depth: self.leaf_depth.iter().sum::<usize>() as f64 / self.n_items as f64,
        }
    }

    /// Checks every structural invariant; used after building and after loading.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("tree validation: {msg}")));
        let (n, m, root) = (self.n_items, self.n_tokens, self.n_items);
        if n == 0 || self.parent.len() != m || m < n + 1 {
            return bad(format!("{n} items with {m} tokens and {} parents", self.parent.len()));
        }
        if self.k < 2 {
            return bad(format!("branch factor {}", self.k));
        }
        if self.parent[root] != root {
            return bad("root must be its own parent".into());
        }
        for t in 0..m {
            if t == root {
                continue;
            }
            let p = self.parent[t];
            if p >= m || p == t || (p < n) {
                return bad(format!("token {t} has invalid parent {p}"));
            }
            // parents must lead to the root without cycles
            let (mut cur, mut steps) = (p, 0);
            while cur != root {
                cur = self.parent[cur];
                steps += 1;
                if steps > m {
                    return bad(format!("cycle above token {t}"));
                }
            }
        }
        if self.item_paths.len() != n || self.leaf_depth.len() != n {
            return bad("one path per item required".into());
        }
        for (item, path) in self.item_paths.iter().enumerate() {
            if path.len() != self.depth {
                return bad(format!("item {item} path length {} != {}", path.len(), self.depth));
            }
            if path.last() != Some(&item) {
                return bad(format!("item {item} path does not end at its leaf"));
            }
            let ld = self.leaf_depth[item];
            if ld == 0 || path[ld - 1] != item || path[..ld - 1].contains(&item) {
                return bad(format!("item {item} leaf depth {ld} inconsistent"));
            }
            if path[ld..].iter().any(|&t| t != item) {
                return bad(format!("item {item} padding must repeat the leaf"));
            }
            self.walk(path)
                .and_then(|end| if end == item { Ok(()) } else { Err(Error::invalid("")) })
                .or_else(|_| bad(format!("item {item} path is not a root-to-leaf walk")))?;
        }
        for t in n..m {
            let c = self.children[t].len();
            let limit = if t == root { self.k.min(n) } else { self.k };
            if c == 0 || c > limit {
                return bad(format!("token {t} has {c} children"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = TreeFile {
            format: TREE_FORMAT.to_string(),
            k: self.k,
            depth: self.depth,
            n_items: self.n_items,
            n_tokens: self.n_tokens,
            parent: self.parent.clone(),
            item_paths: self.item_paths.clone(),
        };
        serde_json::to_string(&file).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TreeFile =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("tree file: {e}")))?;
        if file.format != TREE_FORMAT {
            return Err(Error::invalid(format!(
                "tree file format {:?}, expected {TREE_FORMAT:?}",
                file.format
            )));
        }
        if file.parent.len() != file.n_tokens || file.n_items >= file.n_tokens {
            return Err(Error::invalid("tree file: token counts disagree"));
        }
        if file.parent.iter().any(|&p| p >= file.n_tokens) {
            return Err(Error::invalid("tree file: parent id out of range"));
        }
        let leaf_depth = file
            .item_paths
            .iter()
            .enumerate()
            .map(|(item, p)| p.iter().position(|&t| t == item).map_or(0, |i| i + 1))
            .collect();
        let children = children_from_parent(&file.parent, file.n_items);
        let tree = IdentifierTree {
            k: file.k,
            depth: file.depth,
            n_items: file.n_items,
            n_tokens: file.n_tokens,
            parent: file.parent,
            children,
            item_paths: file.item_paths,
            leaf_depth,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn children_from_parent(parent: &[usize], root: usize) -> Vec<Vec<usize>> {
    let mut children = vec![Vec::new(); parent.len()];
    for (t, &p) in parent.iter().enumerate() {
        if t != root && p < parent.len() {
            children[p].push(t);
        }
    }
    // ascending by construction of the loop
    children
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::random_embeddings;

    fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    fn toy() -> IdentifierTree {
        let emb = random_embeddings(8, 4, 1).unwrap();
        IdentifierTree::build(&emb, 2, 1, TreeMode::Balanced).unwrap()
    }

    #[test]
    fn separated_pairs_cluster_together() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.0, 5.1]];
        for seed in 0..10 {
            let l = constrained_kmeans(&rows(&pts), 2, 2, 2, seed, 100).unwrap();
            assert_eq!(l[0], l[1]);
            assert_eq!(l[2], l[3]);
            assert_ne!(l[0], l[2]);
        }
    }

    #[test]
    fn n_equals_k_gives_singletons() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 0.0]).collect();
        let mut l = constrained_kmeans(&rows(&pts), 5, 1, 2, 3, 100).unwrap();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ten_into_three() {
        let emb = random_embeddings(10, 3, 4).unwrap();
        let pts: Vec<&[f64]> = (0..10).map(|i| emb.row(i)).collect();
        let l = constrained_kmeans(&pts, 3, 3, 4, 7, 100).unwrap();
        let mut sizes = vec![0; 3];
        for c in l {
            sizes[c] += 1;
        }
        sizes.sort();
        assert_eq!(sizes, vec![3, 3, 4]);
    }

    #[test]
    fn infeasible_sizes_rejected() {
        let pts = vec![vec![0.0, 0.0]; 4];
        assert!(constrained_kmeans(&rows(&pts), 5, 0, 1, 0, 10).is_err());
        assert!(constrained_kmeans(&rows(&pts), 2, 3, 3, 0, 10).is_err());
        assert!(constrained_kmeans(&rows(&pts), 2, 1, 1, 0, 10).is_err());
    }

    #[test]
    fn coincident_points_still_balanced() {
        let pts = vec![vec![1.0, 1.0]; 9];
        let l = constrained_kmeans(&rows(&pts), 2, 4, 5, 0, 10).unwrap();
        let ones = l.iter().filter(|&&c| c == 1).count();
        assert!(ones == 4 || ones == 5);
    }

    #[test]
    fn toy_tree_matches_eight_item_layout() {
        let t = toy();
        assert_eq!(t.depth(), 3);
        assert_eq!(t.n_tokens(), 15);
        assert_eq!(t.start_token(), 8);
        // root plus six internal tokens
        assert_eq!(t.n_tokens() - t.n_items(), 7);
        let id = t.item_to_identifier(7).unwrap();
        assert_eq!(id.len(), 3);
        assert!(id[0] > 8 && id[1] > 8);
        assert_eq!(id[2], 7);
        assert_eq!(t.children_of_prefix(&[]).unwrap().len(), 2);
        // first visited prefix gets the first internal id
        assert_eq!(t.item_to_identifier(0).unwrap()[0], 9);
        assert_eq!(t.item_to_identifier(0).unwrap()[1], 10);
    }

    #[test]
    fn single_item_catalog() {
        let emb = random_embeddings(1, 2, 0).unwrap();
        for k in [2, 5] {
            let t = IdentifierTree::build(&emb, k, 0, TreeMode::Balanced).unwrap();
            assert_eq!(t.depth(), 1);
            assert_eq!(t.item_to_identifier(0).unwrap(), &[0]);
            assert_eq!(t.n_tokens(), 2);
        }
    }

    #[test]
    fn sixteen_items_binary_token_count() {
        let emb = random_embeddings(16, 3, 2).unwrap();
        let t = IdentifierTree::build(&emb, 2, 2, TreeMode::Balanced).unwrap();
        // non-leaf tokens 1 + 2 + 4 + 8, root included
        assert_eq!(t.n_tokens() - t.n_items(), 15);
        assert_eq!(t.stats().internal_tokens, 14);
        assert_eq!(t.depth(), 4);
    }

    #[test]
    fn identifier_round_trip() {
        let t = toy();
        for item in 0..8 {
            let id = t.item_to_identifier(item).unwrap().to_vec();
            assert_eq!(*id.last().unwrap(), item);
            assert_eq!(t.identifier_to_item(&id).unwrap(), item);
        }
        assert!(t.item_to_identifier(8).is_err());
    }

    #[test]
    fn tampered_identifier_rejected() {
        let t = toy();
        let mut id = t.item_to_identifier(3).unwrap().to_vec();
        let other = t.item_to_identifier(4).unwrap()[1];
        id[1] = if id[1] == other { t.item_to_identifier(0).unwrap()[1] } else { other };
        if t.identifier_to_item(&id).is_ok() {
            // only possible if the replacement is a sibling subtree containing the leaf
            panic!("tampered path accepted: {id:?}");
        }
    }

    #[test]
    fn complete_identifier_has_no_children() {
        let t = toy();
        let id = t.item_to_identifier(5).unwrap();
        assert!(t.children_of_prefix(id).unwrap().is_empty());
        assert!(t.children_of_prefix(&[1]).is_err());
    }

    #[test]
    fn padded_levels_pass_through() {
        // 5 items, k=2: clusters of 3 and 2; the 2-cluster is shallower
        let emb = random_embeddings(5, 2, 3).unwrap();
        let t = IdentifierTree::build(&emb, 2, 3, TreeMode::Balanced).unwrap();
        assert_eq!(t.depth(), 3);
        let short = (0..5).find(|&i| t.leaf_depth(i) == 2).expect("a shallow leaf");
        let id = t.item_to_identifier(short).unwrap().to_vec();
        assert_eq!(id[1], short);
        assert_eq!(id[2], short);
        assert_eq!(t.children_of_prefix(&id[..2]).unwrap(), &[short]);
        assert_eq!(t.identifier_to_item(&id).unwrap(), short);
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let t = toy();
        let text = t.to_json();
        assert_eq!(IdentifierTree::from_json(&text).unwrap(), t);
        assert!(IdentifierTree::from_json(&text[..text.len() / 2]).is_err());
        let wrong = text.replace(TREE_FORMAT, "other-tree/9");
        assert!(IdentifierTree::from_json(&wrong).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tree.json");
        t.save(&p).unwrap();
        assert_eq!(IdentifierTree::load(&p).unwrap(), t);
    }

    #[test]
    fn loader_revalidates_structure() {
        let t = toy();
        let mut file: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        file["item_paths"][0][2] = serde_json::json!(1);
        assert!(IdentifierTree::from_json(&file.to_string()).is_err());
        let mut file: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        file["parent"][9] = serde_json::json!(10);
        assert!(IdentifierTree::from_json(&file.to_string()).is_err());
    }

    #[test]
    fn branch_factor_and_empty_checks() {
        let emb = random_embeddings(4, 2, 0).unwrap();
        assert!(IdentifierTree::build(&emb, 1, 0, TreeMode::Balanced).is_err());
    }

    #[test]
    fn unbalanced_mode_still_valid() {
        let emb = crate::embeddings::skewed_embeddings(300, 4, 5).unwrap();
        let t = IdentifierTree::build(&emb, 4, 5, TreeMode::Unbalanced).unwrap();
        t.validate().unwrap();
        let b = IdentifierTree::build(&emb, 4, 5, TreeMode::Balanced).unwrap();
        assert!(t.depth() >= b.depth());
    }
}
