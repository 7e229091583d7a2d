//! Dense tensors with a reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the records in reverse, pushes
//! gradients to the inputs, accumulates parameter gradients into the
//! [`ParamStore`] and clears the tape. Values are `f64` throughout.
//!
//! The op set is closed and small. Broadcasting exists only for row
//! vectors added across the leading dimension ([`Graph::add_row`]).
//! Attention and layer normalization are single fused ops with hand-written
//! backward passes.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing width for a 2-D tensor (1 for vectors).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to the weights at each step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let n = value.len();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = p.grad[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                values[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * values[i]);
            }
        }
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    generation: u64,
}

/// Options for the fused multi-head attention op.
#[derive(Debug, Clone)]
pub struct AttentionSpec<'a> {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `batch × k_len` flags, `true` where a key may be attended.
    pub key_mask: &'a [bool],
    /// Query `i` may only see keys `j <= i` (requires `q_len == k_len`).
    pub causal: bool,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    Mean { a: usize, outer: usize, len: usize, inner: usize },
    SumAll(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { a: usize, idx: Vec<usize> },
    Concat { parts: Vec<usize> },
    CosineRows { a: usize, b: usize },
    RowDot { a: usize, b: usize },
    SegmentLogSoftmax { a: usize, segments: Vec<(usize, usize)> },
    Pick { a: usize, idx: Vec<usize> },
    Dropout { a: usize, mask: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, probs: Vec<f64>, dims: [usize; 5] },
    Reshape(usize),
    Transpose(usize),
    NormalizeRows { a: usize, norms: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. One per forward pass; not shared across threads.
pub struct Graph {
    nodes: Vec<Node>,
    generation: u64,
    rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    /// Evaluation tape: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            generation: 0,
            rng: None,
        }
    }

    /// Training tape: dropout draws masks from a seeded generator.
    pub fn training(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            generation: 0,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.idx >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to the current tape".into()));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        if value.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            idx: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// A constant leaf; gradients stop here.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, "constant")
    }

    /// Copies a value into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.node(v)?;
        let t = self.val(i).clone();
        self.push(t, Op::Input, "detach")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.node(a)?, self.node(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(ia, ib), "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, op: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        let (ia, ib) = (self.node(a)?, self.node(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!("{what} {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, op(ia, ib), what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y, "mul")
    }

    /// Adds a length-`n` vector to every row of an `m × n` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.node(a)?, self.node(row)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let n = ta.cols();
        if tb.len() != n {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", ta.shape, tb.shape)));
        }
        let mut data = ta.data.clone();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::AddRow(ia, ib), "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        let data = t.data.iter().map(|x| x * c).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(ia, c), "scale")
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        if t.shape != c.shape {
            return Err(Error::Shape(format!("add_const {:?} vs {:?}", t.shape, c.shape)));
        }
        let data = t.data.iter().zip(&c.data).map(|(x, y)| x + y).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::AddConst(ia), "add_const")
    }

    fn unary(&mut self, a: Var, op: fn(usize) -> Op, f: fn(f64) -> f64, what: &str) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        let data = t.data.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, op(ia), what)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, f64::exp, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log, f64::ln, "log")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |x| x.max(0.0), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, sigmoid, "sigmoid")
    }

    fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        let (outer, len, inner) = Self::axis_split(&t.shape, axis)?;
        let mut data = t.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[at(j)] /= sum;
                }
            }
        }
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Softmax { a: ia, outer, len, inner }, "softmax")
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        let (outer, len, inner) = Self::axis_split(&t.shape, axis)?;
        if len == 0 {
            return Err(Error::Shape("mean over an empty axis".into()));
        }
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += t.data[o * len * inner + j * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|x| *x /= len as f64);
        let mut shape = t.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor { shape, data }, Op::Mean { a: ia, outer, len, inner }, "mean")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let s = self.val(ia).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(ia), "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise layer normalization with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.node(x)?, self.node(gamma)?, self.node(beta)?);
        let (tx, tg, tb) = (self.val(ix), self.val(ig), self.val(ib));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(Error::Shape(format!("layer_norm {:?} with gain {:?}", tx.shape, tg.shape)));
        }
        let rows = tx.len() / n;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data[c] + tb.data[c];
            }
        }
        let shape = tx.shape.clone();
        self.push(
            Tensor { shape, data: out },
            Op::LayerNorm { x: ix, gamma: ig, beta: ib, xhat, inv_std },
            "layer_norm",
        )
    }

    /// Gathers rows of a 2-D tensor; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        let (rows, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            if r >= rows {
                return Err(Error::Shape(format!("row {r} out of range for {rows} rows")));
            }
            data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
        }
        self.push(
            Tensor { shape: vec![idx.len(), c], data },
            Op::GatherRows { a: ia, idx: idx.to_vec() },
            "gather_rows",
        )
    }

    /// Row lookup into an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Concatenates 2-D tensors along the row axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.node(p)).collect::<Result<_>>()?;
        let c = self.val(idx[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let t = self.val(i);
            if t.cols() != c {
                return Err(Error::Shape(format!("concat width {} vs {c}", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor { shape: vec![rows, c], data }, Op::Concat { parts: idx }, "concat")
    }

    /// Cosine similarity between matching rows of two `m × d` tensors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.node(a)?, self.node(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape != tb.shape || ta.shape.len() != 2 {
            return Err(Error::Shape(format!("cosine {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let d = ta.cols();
        let data = (0..ta.rows())
            .map(|r| {
                let (x, y) = (&ta.data[r * d..(r + 1) * d], &tb.data[r * d..(r + 1) * d]);
                let (dot, nx, ny) = dot_norms(x, y);
                dot / (nx * ny)
            })
            .collect();
        self.push(Tensor { shape: vec![ta.rows()], data }, Op::CosineRows { a: ia, b: ib }, "cosine")
    }

    /// Inner products of matching rows.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.node(a)?, self.node(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape != tb.shape || ta.shape.len() != 2 {
            return Err(Error::Shape(format!("row_dot {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let d = ta.cols();
        let data = (0..ta.rows())
            .map(|r| dot(&ta.data[r * d..(r + 1) * d], &tb.data[r * d..(r + 1) * d]))
            .collect();
        self.push(Tensor { shape: vec![ta.rows()], data }, Op::RowDot { a: ia, b: ib }, "row_dot")
    }

    /// Log-softmax within contiguous `(start, len)` segments of a flat vector.
    pub fn segment_log_softmax(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        let mut data = t.data.clone();
        for &(s, l) in segments {
            if l == 0 || s + l > data.len() {
                return Err(Error::Shape(format!("segment ({s}, {l}) invalid for {} values", data.len())));
            }
            log_softmax_in_place(&mut data[s..s + l]);
        }
        let shape = t.shape.clone();
        self.push(
            Tensor { shape, data },
            Op::SegmentLogSoftmax { a: ia, segments: segments.to_vec() },
            "segment_log_softmax",
        )
    }

    /// Selects flat entries into a vector.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            data.push(*t.data.get(i).ok_or_else(|| Error::Shape(format!("pick {i} of {}", t.len())))?);
        }
        self.push(Tensor { shape: vec![idx.len()], data }, Op::Pick { a: ia, idx: idx.to_vec() }, "pick")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        let t = Tensor::new(shape, t.data.clone())?;
        self.push(t, Op::Reshape(ia), "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        if t.shape.len() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", t.shape)));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data[i * c + j];
            }
        }
        self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(ia), "transpose")
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let t = self.val(ia);
        let c = t.cols();
        let norms: Vec<f64> = t.data.chunks(c).map(|r| dot(r, r).sqrt().max(1e-12)).collect();
        let mut data = t.data.clone();
        for (row, n) in data.chunks_mut(c).zip(&norms) {
            row.iter_mut().for_each(|x| *x /= n);
        }
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::NormalizeRows { a: ia, norms }, "normalize_rows")
    }

    /// Inverted dropout; identity on evaluation tapes.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.rng.is_none() || p <= 0.0 {
            return Ok(a);
        }
        let ia = self.node(a)?;
        let n = self.val(ia).len();
        let keep = 1.0 - p;
        let rng = self.rng.as_mut().expect("training tape");
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.val(ia);
        let data = t.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Dropout { a: ia, mask }, "dropout")
    }

    /// Scaled dot-product attention over `heads` heads.
    ///
    /// `q` is `(batch·q_len) × d`, `k` and `v` are `(batch·k_len) × d`; the
    /// result is `(batch·q_len) × d` with heads concatenated. Every query
    /// must have at least one visible key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec<'_>) -> Result<Var> {
        let (iq, ik, iv) = (self.node(q)?, self.node(k)?, self.node(v)?);
        let (tq, tk, tv) = (self.val(iq), self.val(ik), self.val(iv));
        let (b, lq, lk, h) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
        let d = tq.cols();
        if tq.rows() != b * lq || tk.rows() != b * lk || tv.rows() != b * lk || tk.cols() != d || tv.cols() != d {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?} for batch {b}, lengths {lq}/{lk}",
                tq.shape, tk.shape, tv.shape
            )));
        }
        if h == 0 || d % h != 0 {
            return Err(Error::Shape(format!("{d} columns not divisible into {h} heads")));
        }
        if spec.key_mask.len() != b * lk {
            return Err(Error::Shape("attention key mask length".into()));
        }
        if spec.causal && lq != lk {
            return Err(Error::Shape("causal attention needs equal lengths".into()));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * h * lq * lk];
        let mut out = vec![0.0; b * lq * d];
        let mut scores = vec![0.0; lk];
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                for i in 0..lq {
                    let qrow = &tq.data[(bi * lq + i) * d + off..(bi * lq + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    let mut any = false;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let visible = spec.key_mask[bi * lk + j] && (!spec.causal || j <= i);
                        if visible {
                            let krow = &tk.data[(bi * lk + j) * d + off..(bi * lk + j) * d + off + dh];
                            *s = dot(qrow, krow) * scale;
                            max = max.max(*s);
                            any = true;
                        } else {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                    if !any {
                        return Err(Error::invalid(format!(
                            "attention query {i} of batch element {bi} has no visible key"
                        )));
                    }
                    let p = &mut probs[((bi * h + hi) * lq + i) * lk..((bi * h + hi) * lq + i + 1) * lk];
                    let mut sum = 0.0;
                    for j in 0..lk {
                        if scores[j] > f64::NEG_INFINITY {
                            p[j] = (scores[j] - max).exp();
                            sum += p[j];
                        }
                    }
                    let orow = &mut out[(bi * lq + i) * d + off..(bi * lq + i) * d + off + dh];
                    for j in 0..lk {
                        if p[j] != 0.0 {
                            p[j] /= sum;
                            let vrow = &tv.data[(bi * lk + j) * d + off..(bi * lk + j) * d + off + dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor { shape: vec![b * lq, d], data: out },
            Op::Attention { q: iq, k: ik, v: iv, probs, dims: [b, lq, lk, h, d] },
            "attention",
        )
    }

    /// Back-propagates from a scalar, accumulates parameter gradients into
    /// `store`, then clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.run_backward(loss, &mut |id, g| add_into(&mut store.get_mut(id).grad, g))
    }

    /// Like [`Graph::backward`] but adds parameter gradients into `grads`,
    /// indexed like the store the parameters came from.
    pub fn backward_into(&mut self, loss: Var, grads: &mut [Vec<f64>]) -> Result<()> {
        self.run_backward(loss, &mut |id, g| add_into(&mut grads[id.0], g))
    }

    fn run_backward(&mut self, loss: Var, sink: &mut dyn FnMut(ParamId, &[f64])) -> Result<()> {
        if loss.generation != self.generation || loss.idx >= self.nodes.len() {
            return Err(Error::Tape("backward called without a fresh forward pass".into()));
        }
        if self.val(loss.idx).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(vec![1.0]);
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, sink);
        }
        self.nodes.clear();
        self.generation += 1;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], sink: &mut dyn FnMut(ParamId, &[f64])) {
        fn acc(grads: &mut [Option<Vec<f64>>], i: usize, n: usize) -> &mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; n])
        }
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => sink(*id, g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // dA = G Bᵀ, dB = Aᵀ G
                let ga = acc(grads, *a, m * k);
                for r in 0..m {
                    for c in 0..k {
                        let brow = &tb.data[c * n..(c + 1) * n];
                        ga[r * k + c] += dot(&g[r * n..(r + 1) * n], brow);
                    }
                }
                let gb = acc(grads, *b, k * n);
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for c in 0..k {
                        let av = ta.data[r * k + c];
                        if av != 0.0 {
                            for (dst, x) in gb[c * n..(c + 1) * n].iter_mut().zip(grow) {
                                *dst += av * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                add_into(acc(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                let gb = acc(grads, *b, g.len());
                for (dst, x) in gb.iter_mut().zip(g) {
                    *dst -= x;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let ga = acc(grads, *a, g.len());
                for ((dst, x), y) in ga.iter_mut().zip(g).zip(&tb.data) {
                    *dst += x * y;
                }
                let gb = acc(grads, *b, g.len());
                for ((dst, x), y) in gb.iter_mut().zip(g).zip(&ta.data) {
                    *dst += x * y;
                }
            }
            Op::AddRow(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                let n = self.val(*b).len();
                let gb = acc(grads, *b, n);
                for chunk in g.chunks(n) {
                    add_into(gb, chunk);
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, *a, g.len());
                for (dst, x) in ga.iter_mut().zip(g) {
                    *dst += c * x;
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => add_into(acc(grads, *a, g.len()), g),
            Op::Exp(a) => {
                let ga = acc(grads, *a, g.len());
                for ((dst, x), y) in ga.iter_mut().zip(g).zip(&out.data) {
                    *dst += x * y;
                }
            }
            Op::Log(a) => {
                let ta = self.val(*a);
                let ga = acc(grads, *a, g.len());
                for ((dst, x), y) in ga.iter_mut().zip(g).zip(&ta.data) {
                    *dst += x / y;
                }
            }
            Op::Relu(a) => {
                let ta = self.val(*a);
                let ga = acc(grads, *a, g.len());
                for ((dst, x), y) in ga.iter_mut().zip(g).zip(&ta.data) {
                    if *y > 0.0 {
                        *dst += x;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc(grads, *a, g.len());
                for ((dst, x), s) in ga.iter_mut().zip(g).zip(&out.data) {
                    *dst += x * s * (1.0 - s);
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let ga = acc(grads, *a, g.len());
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let s: f64 = (0..*len).map(|j| g[at(j)] * out.data[at(j)]).sum();
                        for j in 0..*len {
                            ga[at(j)] += out.data[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
            }
            Op::Mean { a, outer, len, inner } => {
                let ga = acc(grads, *a, outer * len * inner);
                for o in 0..*outer {
                    for j in 0..*len {
                        for ii in 0..*inner {
                            ga[o * len * inner + j * inner + ii] += g[o * inner + ii] / *len as f64;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let n = self.val(*a).len();
                let ga = acc(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let tg = self.val(*gamma);
                let n = tg.len();
                let rows = inv_std.len();
                let gg = acc(grads, *gamma, n);
                for r in 0..rows {
                    for c in 0..n {
                        gg[c] += g[r * n + c] * xhat[r * n + c];
                    }
                }
                let gb = acc(grads, *beta, n);
                for r in 0..rows {
                    add_into(gb, &g[r * n..(r + 1) * n]);
                }
                let gx = acc(grads, *x, rows * n);
                let mut dxhat = vec![0.0; n];
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for c in 0..n {
                        dxhat[c] = g[r * n + c] * tg.data[c];
                        s1 += dxhat[c];
                        s2 += dxhat[c] * xhat[r * n + c];
                    }
                    let nf = n as f64;
                    for c in 0..n {
                        gx[r * n + c] += inv_std[r] / nf * (nf * dxhat[c] - s1 - xhat[r * n + c] * s2);
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let ta = self.val(*a);
                let c = ta.cols();
                let ga = acc(grads, *a, ta.len());
                for (k, &r) in idx.iter().enumerate() {
                    add_into(&mut ga[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    add_into(acc(grads, p, n), &g[off..off + n]);
                    off += n;
                }
            }
            Op::CosineRows { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let d = ta.cols();
                let rows = ta.rows();
                let mut da = vec![0.0; rows * d];
                let mut db = vec![0.0; rows * d];
                for r in 0..rows {
                    let (x, y) = (&ta.data[r * d..(r + 1) * d], &tb.data[r * d..(r + 1) * d]);
                    let (_, nx, ny) = dot_norms(x, y);
                    let cos = out.data[r];
                    for c in 0..d {
                        da[r * d + c] = g[r] * (y[c] / (nx * ny) - cos * x[c] / (nx * nx));
                        db[r * d + c] = g[r] * (x[c] / (nx * ny) - cos * y[c] / (ny * ny));
                    }
                }
                add_into(acc(grads, *a, rows * d), &da);
                add_into(acc(grads, *b, rows * d), &db);
            }
            Op::RowDot { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let d = ta.cols();
                let ga = acc(grads, *a, ta.len());
                for r in 0..ta.rows() {
                    for c in 0..d {
                        ga[r * d + c] += g[r] * tb.data[r * d + c];
                    }
                }
                let gb = acc(grads, *b, tb.len());
                for r in 0..ta.rows() {
                    for c in 0..d {
                        gb[r * d + c] += g[r] * ta.data[r * d + c];
                    }
                }
            }
            Op::SegmentLogSoftmax { a, segments } => {
                let ga = acc(grads, *a, g.len());
                for &(s, l) in segments {
                    let total: f64 = g[s..s + l].iter().sum();
                    for j in s..s + l {
                        ga[j] += g[j] - out.data[j].exp() * total;
                    }
                }
            }
            Op::Pick { a, idx } => {
                let n = self.val(*a).len();
                let ga = acc(grads, *a, n);
                for (k, &j) in idx.iter().enumerate() {
                    ga[j] += g[k];
                }
            }
            Op::Transpose(a) => {
                let (c, r) = (out.shape[0], out.shape[1]);
                let ga = acc(grads, *a, g.len());
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::NormalizeRows { a, norms } => {
                let c = out.cols();
                let ga = acc(grads, *a, g.len());
                for (r, n) in norms.iter().enumerate() {
                    let y = &out.data[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let proj = dot(gr, y);
                    for j in 0..c {
                        ga[r * c + j] += (gr[j] - proj * y[j]) / n;
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let ga = acc(grads, *a, g.len());
                for ((dst, x), m) in ga.iter_mut().zip(g).zip(mask) {
                    *dst += x * m;
                }
            }
            Op::Attention { q, k, v, probs, dims } => {
                let [b, lq, lk, h, d] = *dims;
                let dh = d / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let (tq, tk, tv) = (self.val(*q), self.val(*k), self.val(*v));
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tk.len()];
                let mut dv = vec![0.0; tv.len()];
                let mut dp = vec![0.0; lk];
                for bi in 0..b {
                    for hi in 0..h {
                        let off = hi * dh;
                        for i in 0..lq {
                            let p = &probs[((bi * h + hi) * lq + i) * lk..((bi * h + hi) * lq + i + 1) * lk];
                            let grow = &g[(bi * lq + i) * d + off..(bi * lq + i) * d + off + dh];
                            let mut s = 0.0;
                            for j in 0..lk {
                                if p[j] != 0.0 {
                                    let vr = (bi * lk + j) * d + off;
                                    dp[j] = dot(grow, &tv.data[vr..vr + dh]);
                                    s += p[j] * dp[j];
                                    for (dst, x) in dv[vr..vr + dh].iter_mut().zip(grow) {
                                        *dst += p[j] * x;
                                    }
                                }
                            }
                            let qr = (bi * lq + i) * d + off;
                            for j in 0..lk {
                                if p[j] != 0.0 {
                                    let ds = p[j] * (dp[j] - s) * scale;
                                    let kr = (bi * lk + j) * d + off;
                                    for c in 0..dh {
                                        dq[qr + c] += ds * tk.data[kr + c];
                                        dk[kr + c] += ds * tq.data[qr + c];
                                    }
                                }
                            }
                        }
                    }
                }
                add_into(acc(grads, *q, dq.len()), &dq);
                add_into(acc(grads, *k, dk.len()), &dk);
                add_into(acc(grads, *v, dv.len()), &dv);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_norms(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let nx = dot(x, x).sqrt().max(1e-12);
    let ny = dot(y, y).sqrt().max(1e-12);
    (dot(x, y), nx, ny)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Stable in-place log-softmax of a slice.
pub fn log_softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter_mut().for_each(|v| *v -= lse);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Central-difference check of `loss_fn`'s gradient with respect to the
/// parameters in `store`.
///
/// Up to `max_coords` coordinates are probed (evenly strided over all
/// parameters). Returns the largest `|g_a − g_n| / max(1e-8, |g_a| + |g_n|)`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, max_coords: usize, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.params().iter().map(|p| p.grad.clone()).collect();

    let coords: Vec<(usize, usize)> = store
        .params()
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.value.len()).map(move |j| (pi, j)))
        .collect();
    let stride = coords.len().div_ceil(max_coords.max(1)).max(1);
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss_fn(&mut g, store)?;
        Ok(g.value(v).item())
    };
    let mut worst = 0.0f64;
    for &(pi, j) in coords.iter().step_by(stride) {
        let orig = store.params()[pi].value.data()[j];
        store.params_mut()[pi].value.data_mut()[j] = orig + eps;
        let fp = eval(store)?;
        store.params_mut()[pi].value.data_mut()[j] = orig - eps;
        let fm = eval(store)?;
        store.params_mut()[pi].value.data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[pi][j];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
