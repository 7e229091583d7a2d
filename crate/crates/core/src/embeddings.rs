//! Item embedding providers that seed identifier construction.
//!
//! The tree only needs vectors where items with similar interaction
//! patterns lie close together. [`svd_embeddings`] derives them from the
//! binary user-item matrix with a randomized truncated SVD;
//! [`random_embeddings`] is the uninformed baseline; [`load_embeddings`]
//! accepts vectors trained elsewhere.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::UserHistory;
use crate::{Error, Result};

/// Row-major `n_items × dim` matrix; row `i` belongs to item `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddings {
    n_items: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ItemEmbeddings {
    pub fn new(n_items: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if n_items == 0 {
            return Err(Error::invalid("embedding matrix needs at least one item"));
        }
        if dim < 2 {
            return Err(Error::invalid(format!("embedding dimension must be at least 2, got {dim}")));
        }
        if values.len() != n_items * dim {
            return Err(Error::Shape(format!(
                "{} values for a {n_items}x{dim} embedding matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {}", pos / dim)));
        }
        Ok(ItemEmbeddings { n_items, dim, values })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Entries i.i.d. uniform on [-1, 1].
pub fn random_embeddings(n_items: usize, dim: usize, seed: u64) -> Result<ItemEmbeddings> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n_items * dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    ItemEmbeddings::new(n_items, dim, values)
}

/// Gaussian blobs with Zipf-distributed cluster sizes.
///
/// Unconstrained k-means on these produces lopsided splits, which is what
/// the imbalanced-tree benchmark needs.
pub fn skewed_embeddings(n_items: usize, dim: usize, seed: u64) -> Result<ItemEmbeddings> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blobs = 16.min(n_items.max(1));
    let weights: Vec<f64> = (1..=n_blobs).map(|r| 1.0 / (r as f64).powf(1.5)).collect();
    let total: f64 = weights.iter().sum();
    let centers: Vec<Vec<f64>> = (0..n_blobs)
        .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
        .collect();
    let mut values = Vec::with_capacity(n_items * dim);
    for _ in 0..n_items {
        let mut u = rng.random::<f64>() * total;
        let mut blob = n_blobs - 1;
        for (b, w) in weights.iter().enumerate() {
            if u < *w {
                blob = b;
                break;
            }
            u -= w;
        }
        // nested sub-blobs keep the skew at every scale
        let sub = rng.random::<f64>().powi(3);
        for c in &centers[blob] {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(c + z * (0.3 + 2.0 * sub));
        }
    }
    ItemEmbeddings::new(n_items, dim, values)
}

/// Reads `N d` followed by N rows of d whitespace-separated floats.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<ItemEmbeddings> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| perr(1, "missing `N d` header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| perr(hline + 1, format!("bad header {header:?}")))?;
    if dims.len() != 2 {
        return Err(perr(hline + 1, format!("header must be `N d`, got {header:?}")));
    }
    let (n, d) = (dims[0], dims[1]);
    let mut values = Vec::with_capacity(n * d);
    let mut rows = 0;
    for (idx, line) in lines {
        if rows == n {
            return Err(perr(idx + 1, format!("expected {n} rows, found more")));
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(idx + 1, format!("row {rows}: unparseable value")))?;
        if row.len() != d {
            return Err(perr(idx + 1, format!("row {rows}: expected {d} values, found {}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(perr(idx + 1, format!("row {rows}: non-finite value")));
        }
        values.extend(row);
        rows += 1;
    }
    if rows != n {
        return Err(perr(hline + 1, format!("expected {n} rows, found {rows}")));
    }
    ItemEmbeddings::new(n, d, values)
}

pub fn write_embeddings(path: impl AsRef<Path>, emb: &ItemEmbeddings) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{} {}\n", emb.n_items, emb.dim);
    for i in 0..emb.n_items {
        let row: Vec<String> = emb.row(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A linear operator exposing the two products a randomized SVD needs.
pub trait MatrixOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `self · x` for `x` of shape `ncols × p`.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// `selfᵀ · x` for `x` of shape `nrows × p`.
    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

impl MatrixOperator for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }
    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(x)
    }
}

/// Binary user × item matrix stored as per-user sorted item lists.
#[derive(Debug, Clone)]
pub struct BinaryInteractions {
    rows: Vec<Vec<usize>>,
    n_items: usize,
}

impl BinaryInteractions {
    pub fn from_histories(histories: &[UserHistory], n_items: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(histories.len());
        for h in histories {
            let mut items = h.items.clone();
            items.sort_unstable();
            items.dedup();
            if let Some(&bad) = items.iter().find(|&&i| i >= n_items) {
                return Err(Error::invalid(format!("item {bad} out of range for catalog of {n_items}")));
            }
            rows.push(items);
        }
        Ok(BinaryInteractions { rows, n_items })
    }
}

impl MatrixOperator for BinaryInteractions {
    fn nrows(&self) -> usize {
        self.rows.len()
    }
    fn ncols(&self) -> usize {
        self.n_items
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows.len(), x.ncols());
        for (u, items) in self.rows.iter().enumerate() {
            for c in 0..x.ncols() {
                out[(u, c)] = items.iter().map(|&i| x[(i, c)]).sum();
            }
        }
        out
    }
    fn apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_items, x.ncols());
        for (u, items) in self.rows.iter().enumerate() {
            for c in 0..x.ncols() {
                let v = x[(u, c)];
                for &i in items {
                    out[(i, c)] += v;
                }
            }
        }
        out
    }
}

/// Rank-`rank` factorization `A ≈ U diag(s) Vᵀ`.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl TruncatedSvd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.singular_values.clone()));
        &self.u * s * self.v.transpose()
    }
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Randomized range finder with `power_iters` subspace iterations,
/// followed by an exact SVD of the small projected matrix.
pub fn randomized_svd<A: MatrixOperator>(
    a: &A,
    rank: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<TruncatedSvd> {
    let (m, n) = (a.nrows(), a.ncols());
    if rank == 0 || rank > m.min(n) {
        return Err(Error::invalid(format!(
            "rank {rank} must be in 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    let width = (rank + oversample).min(m.min(n));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(a.apply(&omega));
    for _ in 0..power_iters {
        let z = orthonormalize(a.apply_transpose(&q));
        q = orthonormalize(a.apply(&z));
    }
    // B = Qᵀ A, computed as (Aᵀ Q)ᵀ
    let b = a.apply_transpose(&q).transpose();
    let svd = b.svd(true, true);
    let ub = svd.u.ok_or_else(|| Error::invalid("svd failed to produce U"))?;
    let vt = svd.v_t.ok_or_else(|| Error::invalid("svd failed to produce V"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let order = &order[..rank];
    let u_full = &q * ub;
    let u = DMatrix::from_fn(m, rank, |r, c| u_full[(r, order[c])]);
    let v = DMatrix::from_fn(n, rank, |r, c| vt[(order[c], r)]);
    let singular_values = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok(TruncatedSvd { u, singular_values, v })
}

/// Item factors `V·diag(s)` of a rank-`dim` SVD of the binary user-item matrix.
pub fn svd_embeddings(histories: &[UserHistory], n_items: usize, dim: usize, seed: u64) -> Result<ItemEmbeddings> {
    if histories.is_empty() || n_items == 0 {
        return Err(Error::invalid("cannot factorize an empty corpus"));
    }
    if dim > n_items.min(histories.len()) {
        return Err(Error::invalid(format!(
            "embedding dimension {dim} exceeds min(items={n_items}, users={})",
            histories.len()
        )));
    }
    let a = BinaryInteractions::from_histories(histories, n_items)?;
    let svd = randomized_svd(&a, dim, 8, 6, seed)?;
    let mut values = Vec::with_capacity(n_items * dim);
    for i in 0..n_items {
        for c in 0..dim {
            values.push(svd.v[(i, c)] * svd.singular_values[c]);
        }
    }
    ItemEmbeddings::new(n_items, dim, values)
}
