//! Encoder-decoder scorer over identifier tokens.
//!
//! The encoder reads an item history; the decoder reads `[start, y1, .., yi]`
//! and its last row scores the legal next tokens by inner product with their
//! embedding rows. Rows `0..N` of the token table double as item embeddings
//! on the encoder side. Both stacks are pre-norm transformer blocks.
//!
//! Encoder positions count back from the most recent item, so the latest
//! interaction always sits at position 0 regardless of history length.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{dot, sigmoid, AttentionSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::idtree::IdentifierTree;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TREERET1";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_history_len: usize,
    pub dropout: f64,
    pub n_items: usize,
    pub n_tokens: usize,
    pub k: usize,
    pub depth: usize,
}

impl ModelConfig {
    /// Defaults (d=64, one layer, four heads) sized to `tree`.
    pub fn for_tree(tree: &IdentifierTree) -> Self {
        ModelConfig {
            d: 64,
            n_layers: 1,
            n_heads: 4,
            ffn_dim: 256,
            max_history_len: 50,
            dropout: 0.1,
            n_items: tree.n_items(),
            n_tokens: tree.n_tokens(),
            k: tree.k(),
            depth: tree.depth(),
        }
    }

    /// Sets `d` and keeps the feed-forward width at `4·d`.
    pub fn with_dim(mut self, d: usize) -> Self {
        self.d = d;
        self.ffn_dim = 4 * d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::invalid(format!("d={} not divisible by {} heads", self.d, self.n_heads)));
        }
        if self.max_history_len == 0 || self.ffn_dim == 0 || self.n_layers == 0 {
            return Err(Error::invalid("max_history_len, ffn_dim and n_layers must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.n_tokens <= self.n_items || self.depth == 0 {
            return Err(Error::invalid("token table must extend past the item rows"));
        }
        Ok(())
    }

    /// Checks that the config was sized for `tree`.
    pub fn check_tree(&self, tree: &IdentifierTree) -> Result<()> {
        let want = (tree.n_items(), tree.n_tokens(), tree.k(), tree.depth());
        let have = (self.n_items, self.n_tokens, self.k, self.depth);
        if want != have {
            return Err(Error::invalid(format!(
                "model built for (N, M, k, l) = {have:?} but tree has {want:?}"
            )));
        }
        Ok(())
    }

    pub fn start_token(&self) -> usize {
        self.n_items
    }
}

#[derive(Debug, Clone)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayerIds {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct DecLayerIds {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct ParamIds {
    emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc: Vec<EncLayerIds>,
    dec: Vec<DecLayerIds>,
    enc_ln: LnIds,
    dec_ln: LnIds,
    w_s: ParamId,
}

/// Expected `(name, shape)` of every parameter, in store order.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d, cfg.ffn_dim);
    let mut v = vec![
        ("emb".to_string(), vec![cfg.n_tokens, d]),
        ("enc.pos".to_string(), vec![cfg.max_history_len, d]),
        ("dec.pos".to_string(), vec![cfg.depth + 1, d]),
    ];
    let ln = |v: &mut Vec<(String, Vec<usize>)>, p: &str| {
        v.push((format!("{p}.g"), vec![d]));
        v.push((format!("{p}.b"), vec![d]));
    };
    let attn = |v: &mut Vec<(String, Vec<usize>)>, p: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            v.push((format!("{p}.{w}"), vec![d, d]));
        }
    };
    let ffn = |v: &mut Vec<(String, Vec<usize>)>, p: &str| {
        v.push((format!("{p}.w1"), vec![d, f]));
        v.push((format!("{p}.b1"), vec![f]));
        v.push((format!("{p}.w2"), vec![f, d]));
        v.push((format!("{p}.b2"), vec![d]));
    };
    for i in 0..cfg.n_layers {
        ln(&mut v, &format!("enc.{i}.ln1"));
        attn(&mut v, &format!("enc.{i}.attn"));
        ln(&mut v, &format!("enc.{i}.ln2"));
        ffn(&mut v, &format!("enc.{i}.ffn"));
    }
    for i in 0..cfg.n_layers {
        ln(&mut v, &format!("dec.{i}.ln1"));
        attn(&mut v, &format!("dec.{i}.self"));
        ln(&mut v, &format!("dec.{i}.ln2"));
        attn(&mut v, &format!("dec.{i}.cross"));
        ln(&mut v, &format!("dec.{i}.ln3"));
        ffn(&mut v, &format!("dec.{i}.ffn"));
    }
    ln(&mut v, "enc.ln");
    ln(&mut v, "dec.ln");
    v.push(("w_s".to_string(), vec![d, d]));
    v
}

fn resolve_ids(cfg: &ModelConfig, store: &ParamStore) -> Result<ParamIds> {
    let id = |name: String| {
        store
            .id(&name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    };
    let ln = |p: String| -> Result<LnIds> {
        Ok(LnIds {
            g: id(format!("{p}.g"))?,
            b: id(format!("{p}.b"))?,
        })
    };
    let attn = |p: String| -> Result<AttnIds> {
        Ok(AttnIds {
            wq: id(format!("{p}.wq"))?,
            wk: id(format!("{p}.wk"))?,
            wv: id(format!("{p}.wv"))?,
            wo: id(format!("{p}.wo"))?,
        })
    };
    let ffn = |p: String| -> Result<FfnIds> {
        Ok(FfnIds {
            w1: id(format!("{p}.w1"))?,
            b1: id(format!("{p}.b1"))?,
            w2: id(format!("{p}.w2"))?,
            b2: id(format!("{p}.b2"))?,
        })
    };
    let enc = (0..cfg.n_layers)
        .map(|i| {
            Ok(EncLayerIds {
                ln1: ln(format!("enc.{i}.ln1"))?,
                attn: attn(format!("enc.{i}.attn"))?,
                ln2: ln(format!("enc.{i}.ln2"))?,
                ffn: ffn(format!("enc.{i}.ffn"))?,
            })
        })
        .collect::<Result<_>>()?;
    let dec = (0..cfg.n_layers)
        .map(|i| {
            Ok(DecLayerIds {
                ln1: ln(format!("dec.{i}.ln1"))?,
                self_attn: attn(format!("dec.{i}.self"))?,
                ln2: ln(format!("dec.{i}.ln2"))?,
                cross: attn(format!("dec.{i}.cross"))?,
                ln3: ln(format!("dec.{i}.ln3"))?,
                ffn: ffn(format!("dec.{i}.ffn"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ParamIds {
        emb: id("emb".into())?,
        enc_pos: id("enc.pos".into())?,
        dec_pos: id("dec.pos".into())?,
        enc,
        dec,
        enc_ln: ln("enc.ln".into())?,
        dec_ln: ln("dec.ln".into())?,
        w_s: id("w_s".into())?,
    })
}

/// Encoder hidden states for one history.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `t × d`, oldest item first.
    pub x: Tensor,
    pub mask: Vec<bool>,
}

/// Decoder hidden states, one row per decoder input position.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub y: Tensor,
}

/// Encoder states recorded on a tape for a batch of histories.
#[derive(Debug, Clone)]
pub struct EncState {
    /// `(batch · t_max) × d`.
    pub x: Var,
    pub mask: Vec<bool>,
    pub t_max: usize,
    pub lens: Vec<usize>,
    cross_kv: Vec<Option<(Var, Var)>>,
}

/// Binds parameters to a tape on first use.
pub struct Ctx<'g, 's> {
    pub g: &'g mut Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'g, 's> Ctx<'g, 's> {
    pub fn new(g: &'g mut Graph, store: &'s ParamStore) -> Self {
        Ctx {
            g,
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.g.param(self.store, id)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    ids: ParamIds,
}

impl Model {
    /// Fresh parameters: normal(0, 0.1) embeddings, Glorot-uniform matrices,
    /// unit gains and zero biases.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let mut store = ParamStore::new();
        for (name, shape) in param_layout(&cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name == "emb" || name.ends_with(".pos") {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".g") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            };
            store.add(name, Tensor::new(shape, data)?)?;
        }
        let ids = resolve_ids(&cfg, &store)?;
        Ok(Model { cfg, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_params(&self) -> usize {
        self.store.n_values()
    }

    pub fn emb_id(&self) -> ParamId {
        self.ids.emb
    }

    pub fn w_s_id(&self) -> ParamId {
        self.ids.w_s
    }

    /// Token embedding row.
    pub fn token_row(&self, token: usize) -> &[f64] {
        self.store.value(self.ids.emb).row(token)
    }

    fn check_items(&self, history: &[usize]) -> Result<()> {
        if history.is_empty() {
            return Err(Error::invalid("empty history"));
        }
        if let Some(&bad) = history.iter().find(|&&i| i >= self.cfg.n_items) {
            return Err(Error::invalid(format!("item {bad} out of range for {} items", self.cfg.n_items)));
        }
        Ok(())
    }

    /// Keeps the most recent `max_history_len` items.
    pub fn truncate<'h>(&self, history: &'h [usize]) -> &'h [usize] {
        let keep = history.len().min(self.cfg.max_history_len);
        &history[history.len() - keep..]
    }

    fn layer_norm(&self, ctx: &mut Ctx, x: Var, ln: &LnIds) -> Result<Var> {
        let g = ctx.p(ln.g)?;
        let b = ctx.p(ln.b)?;
        ctx.g.layer_norm(x, g, b)
    }

    fn ffn(&self, ctx: &mut Ctx, x: Var, f: &FfnIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (ctx.p(f.w1)?, ctx.p(f.b1)?, ctx.p(f.w2)?, ctx.p(f.b2)?);
        let h = ctx.g.matmul(x, w1)?;
        let h = ctx.g.add_row(h, b1)?;
        let h = ctx.g.relu(h)?;
        let h = ctx.g.matmul(h, w2)?;
        ctx.g.add_row(h, b2)
    }

    fn residual(&self, ctx: &mut Ctx, h: Var, delta: Var) -> Result<Var> {
        let delta = ctx.g.dropout(delta, self.cfg.dropout)?;
        ctx.g.add(h, delta)
    }

    /// Runs the encoder over a batch of histories on `ctx`'s tape.
    pub fn encode_graph(&self, ctx: &mut Ctx, histories: &[&[usize]]) -> Result<EncState> {
        if histories.is_empty() {
            return Err(Error::invalid("empty encoder batch"));
        }
        let trimmed: Vec<&[usize]> = histories
            .iter()
            .map(|h| {
                self.check_items(h)?;
                Ok(self.truncate(h))
            })
            .collect::<Result<_>>()?;
        let t_max = trimmed.iter().map(|h| h.len()).max().unwrap_or(0);
        let b = trimmed.len();
        let mut tokens = Vec::with_capacity(b * t_max);
        let mut positions = Vec::with_capacity(b * t_max);
        let mut mask = Vec::with_capacity(b * t_max);
        for h in &trimmed {
            let t = h.len();
            for p in 0..t_max {
                if p < t {
                    tokens.push(h[p]);
                    positions.push(t - 1 - p);
                    mask.push(true);
                } else {
                    tokens.push(0);
                    positions.push(0);
                    mask.push(false);
                }
            }
        }
        let emb = ctx.p(self.ids.emb)?;
        let pos = ctx.p(self.ids.enc_pos)?;
        let te = ctx.g.gather_rows(emb, &tokens)?;
        let pe = ctx.g.gather_rows(pos, &positions)?;
        let mut h = ctx.g.add(te, pe)?;
        h = ctx.g.dropout(h, self.cfg.dropout)?;
        for layer in &self.ids.enc {
            let a = self.layer_norm(ctx, h, &layer.ln1)?;
            let spec = AttentionSpec {
                batch: b,
                q_len: t_max,
                k_len: t_max,
                heads: self.cfg.n_heads,
                key_mask: &mask,
                causal: false,
            };
            let o = self.attention(ctx, a, a, &layer.attn, &spec)?;
            h = self.residual(ctx, h, o)?;
            let f = self.layer_norm(ctx, h, &layer.ln2)?;
            let f = self.ffn(ctx, f, &layer.ffn)?;
            h = self.residual(ctx, h, f)?;
        }
        let x = self.layer_norm(ctx, h, &self.ids.enc_ln)?;
        Ok(EncState {
            x,
            mask,
            t_max,
            lens: trimmed.iter().map(|h| h.len()).collect(),
            cross_kv: vec![None; self.cfg.n_layers],
        })
    }

    fn attention(&self, ctx: &mut Ctx, xq: Var, xkv: Var, w: &AttnIds, spec: &AttentionSpec) -> Result<Var> {
        let (wq, wk, wv, wo) = (ctx.p(w.wq)?, ctx.p(w.wk)?, ctx.p(w.wv)?, ctx.p(w.wo)?);
        let q = ctx.g.matmul(xq, wq)?;
        let k = ctx.g.matmul(xkv, wk)?;
        let v = ctx.g.matmul(xkv, wv)?;
        let o = ctx.g.attention(q, k, v, spec)?;
        ctx.g.matmul(o, wo)
    }

    /// Runs the decoder on `inputs` (equal-length token rows, each starting
    /// with the start token); `enc_index[i]` picks the encoder batch element
    /// that row `i` attends to. Returns `(inputs.len() · L) × d`.
    pub fn decode_graph(&self, ctx: &mut Ctx, enc: &mut EncState, enc_index: &[usize], inputs: &[Vec<usize>]) -> Result<Var> {
        let nb = inputs.len();
        if nb == 0 || enc_index.len() != nb {
            return Err(Error::invalid("decoder batch and encoder index disagree"));
        }
        let len = inputs[0].len();
        if len == 0 || len > self.cfg.depth + 1 || inputs.iter().any(|r| r.len() != len) {
            return Err(Error::invalid(format!("decoder inputs must share a length in 1..={}", self.cfg.depth + 1)));
        }
        let n_enc = enc.lens.len();
        if let Some(&bad) = enc_index.iter().find(|&&e| e >= n_enc) {
            return Err(Error::invalid(format!("encoder element {bad} out of range")));
        }
        let tokens: Vec<usize> = inputs.concat();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.n_tokens) {
            return Err(Error::invalid(format!("token {bad} out of range for {} tokens", self.cfg.n_tokens)));
        }
        let positions: Vec<usize> = (0..nb).flat_map(|_| 0..len).collect();
        let t = enc.t_max;
        let kv_rows: Vec<usize> = enc_index.iter().flat_map(|&e| e * t..(e + 1) * t).collect();
        let cross_mask: Vec<bool> = kv_rows.iter().map(|&r| enc.mask[r]).collect();
        let causal_mask = vec![true; nb * len];

        let emb = ctx.p(self.ids.emb)?;
        let pos = ctx.p(self.ids.dec_pos)?;
        let te = ctx.g.gather_rows(emb, &tokens)?;
        let pe = ctx.g.gather_rows(pos, &positions)?;
        let mut h = ctx.g.add(te, pe)?;
        h = ctx.g.dropout(h, self.cfg.dropout)?;
        for (li, layer) in self.ids.dec.iter().enumerate() {
            let a = self.layer_norm(ctx, h, &layer.ln1)?;
            let spec = AttentionSpec {
                batch: nb,
                q_len: len,
                k_len: len,
                heads: self.cfg.n_heads,
                key_mask: &causal_mask,
                causal: true,
            };
            let o = self.attention(ctx, a, a, &layer.self_attn, &spec)?;
            h = self.residual(ctx, h, o)?;

            let a = self.layer_norm(ctx, h, &layer.ln2)?;
            let (k_all, v_all) = match enc.cross_kv[li] {
                Some(kv) => kv,
                None => {
                    let wk = ctx.p(layer.cross.wk)?;
                    let wv = ctx.p(layer.cross.wv)?;
                    let kv = (ctx.g.matmul(enc.x, wk)?, ctx.g.matmul(enc.x, wv)?);
                    enc.cross_kv[li] = Some(kv);
                    kv
                }
            };
            let k = ctx.g.gather_rows(k_all, &kv_rows)?;
            let v = ctx.g.gather_rows(v_all, &kv_rows)?;
            let wq = ctx.p(layer.cross.wq)?;
            let wo = ctx.p(layer.cross.wo)?;
            let q = ctx.g.matmul(a, wq)?;
            let spec = AttentionSpec {
                batch: nb,
                q_len: len,
                k_len: t,
                heads: self.cfg.n_heads,
                key_mask: &cross_mask,
                causal: false,
            };
            let o = ctx.g.attention(q, k, v, &spec)?;
            let o = ctx.g.matmul(o, wo)?;
            h = self.residual(ctx, h, o)?;

            let f = self.layer_norm(ctx, h, &layer.ln3)?;
            let f = self.ffn(ctx, f, &layer.ffn)?;
            h = self.residual(ctx, h, f)?;
        }
        self.layer_norm(ctx, h, &self.ids.dec_ln)
    }

    /// Eval-mode encoder pass over one history.
    pub fn encode(&self, history: &[usize]) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store);
        let enc = self.encode_graph(&mut ctx, &[history])?;
        Ok(EncoderOutput {
            x: g.value(enc.x).clone(),
            mask: enc.mask,
        })
    }

    /// Eval-mode decoder pass for `[start] ++ prefix`.
    pub fn decode(&self, enc: &EncoderOutput, prefix: &[usize]) -> Result<DecoderOutput> {
        let y = self.decode_batch(enc, std::slice::from_ref(&prefix.to_vec()))?;
        Ok(DecoderOutput { y })
    }

    /// Eval-mode decoder pass for several equal-length prefixes against one
    /// encoder output. Row `i·(L+1) + j` is position `j` of prefix `i`.
    pub fn decode_batch(&self, enc: &EncoderOutput, prefixes: &[Vec<usize>]) -> Result<Tensor> {
        if enc.x.rows() != enc.mask.len() || enc.x.cols() != self.cfg.d {
            return Err(Error::Shape("encoder output does not match the model".into()));
        }
        let start = self.cfg.start_token();
        let inputs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(start).chain(p.iter().copied()).collect())
            .collect();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store);
        let x = ctx.g.constant(enc.x.clone())?;
        let mut state = EncState {
            x,
            mask: enc.mask.clone(),
            t_max: enc.mask.len(),
            lens: vec![enc.mask.iter().filter(|&&m| m).count()],
            cross_kv: vec![None; self.cfg.n_layers],
        };
        let idx = vec![0; inputs.len()];
        let y = self.decode_graph(&mut ctx, &mut state, &idx, &inputs)?;
        Ok(g.value(y).clone())
    }

    /// Log-probabilities of `candidates` given one decoder row.
    ///
    /// A single candidate gets exactly 0.
    pub fn step_log_probs(&self, row: &[f64], candidates: &[usize]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::invalid("empty candidate set"));
        }
        if let Some(&bad) = candidates.iter().find(|&&c| c >= self.cfg.n_tokens) {
            return Err(Error::invalid(format!("candidate {bad} out of range")));
        }
        if candidates.len() == 1 {
            return Ok(vec![0.0]);
        }
        let mut logits: Vec<f64> = candidates.iter().map(|&c| dot(row, self.token_row(c))).collect();
        crate::autodiff::log_softmax_in_place(&mut logits);
        Ok(logits)
    }

    pub fn step_distribution(&self, row: &[f64], candidates: &[usize]) -> Result<Vec<f64>> {
        Ok(self.step_log_probs(row, candidates)?.into_iter().map(f64::exp).collect())
    }

    /// Mean of unmasked encoder rows and of all decoder rows.
    pub fn pooled_reps(&self, enc: &EncoderOutput, dec: &DecoderOutput) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((masked_mean(&enc.x, &enc.mask)?, masked_mean(&dec.y, &vec![true; dec.y.rows()])?))
    }

    /// `σ(z_xᵀ W_s z_y)`.
    pub fn pair_similarity(&self, z_x: &[f64], z_y: &[f64]) -> Result<f64> {
        let d = self.cfg.d;
        if z_x.len() != d || z_y.len() != d {
            return Err(Error::Shape(format!("similarity inputs must have length {d}")));
        }
        let w = self.store.value(self.ids.w_s).data();
        let mut s = 0.0;
        for i in 0..d {
            s += z_x[i] * dot(&w[i * d..(i + 1) * d], z_y);
        }
        Ok(sigmoid(s))
    }

    /// Writes parameters plus `manifest` integers; with `with_optimizer` the
    /// Adam moments and step count are included.
    pub fn save(&self, path: impl AsRef<Path>, manifest: &[(&str, u64)], with_optimizer: bool) -> Result<()> {
        let path = path.as_ref();
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let c = &self.cfg;
        let mut entries: Vec<(String, u64)> = vec![
            ("d".into(), c.d as u64),
            ("n_layers".into(), c.n_layers as u64),
            ("n_heads".into(), c.n_heads as u64),
            ("ffn_dim".into(), c.ffn_dim as u64),
            ("max_history_len".into(), c.max_history_len as u64),
            ("dropout_ppm".into(), (c.dropout * 1e6).round() as u64),
            ("n_items".into(), c.n_items as u64),
            ("n_tokens".into(), c.n_tokens as u64),
            ("k".into(), c.k as u64),
            ("depth".into(), c.depth as u64),
            ("adam_step".into(), self.store.step_count()),
        ];
        entries.extend(manifest.iter().map(|(k, v)| (k.to_string(), *v)));
        put_u32(&mut buf, entries.len() as u32);
        for (k, v) in &entries {
            put_str(&mut buf, k);
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut blocks: Vec<(String, &[usize], &[f64])> = Vec::new();
        for p in self.store.params() {
            blocks.push((p.name.clone(), p.value.shape(), p.value.data()));
        }
        if with_optimizer {
            for p in self.store.params() {
                blocks.push((format!("opt.m/{}", p.name), p.value.shape(), &p.m));
                blocks.push((format!("opt.v/{}", p.name), p.value.shape(), &p.v));
            }
        }
        put_u32(&mut buf, blocks.len() as u32);
        for (name, shape, data) in blocks {
            put_str(&mut buf, &name);
            put_u32(&mut buf, shape.len() as u32);
            for &dim in shape {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &x in data {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint and checks it against `tree`. Returns the model
    /// and the full manifest.
    pub fn load(path: impl AsRef<Path>, tree: &IdentifierTree) -> Result<(Self, Vec<(String, u64)>)> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        };
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8).map_err(&parse_err)? != CHECKPOINT_MAGIC {
            return Err(parse_err("bad checkpoint magic".into()));
        }
        let n_entries = r.u32().map_err(&parse_err)?;
        let mut manifest = Vec::new();
        for _ in 0..n_entries {
            let k = r.string().map_err(&parse_err)?;
            let v = r.u64().map_err(&parse_err)?;
            manifest.push((k, v));
        }
        let get = |key: &str| -> Result<usize> {
            manifest
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v as usize)
                .ok_or_else(|| parse_err(format!("manifest lacks {key}")))
        };
        let cfg = ModelConfig {
            d: get("d")?,
            n_layers: get("n_layers")?,
            n_heads: get("n_heads")?,
            ffn_dim: get("ffn_dim")?,
            max_history_len: get("max_history_len")?,
            dropout: get("dropout_ppm")? as f64 / 1e6,
            n_items: get("n_items")?,
            n_tokens: get("n_tokens")?,
            k: get("k")?,
            depth: get("depth")?,
        };
        cfg.validate()?;
        cfg.check_tree(tree)?;
        let mut model = Model::new(cfg, 0)?;
        model.store.set_step_count(get("adam_step")? as u64);
        let n_blocks = r.u32().map_err(&parse_err)?;
        let mut seen = vec![false; model.store.len()];
        for _ in 0..n_blocks {
            let name = r.string().map_err(&parse_err)?;
            let rank = r.u32().map_err(&parse_err)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().map_err(&parse_err)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4).map_err(&parse_err)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(parse_err(format!("block {name}: non-finite value")));
            }
            let (base, slot) = match name.split_once('/') {
                Some(("opt.m", rest)) => (rest, 1),
                Some(("opt.v", rest)) => (rest, 2),
                _ => (name.as_str(), 0),
            };
            let id = model
                .store
                .id(base)
                .ok_or_else(|| Error::invalid(format!("unexpected parameter block {name}")))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {shape:?}, expected {:?}",
                    p.value.shape()
                )));
            }
            match slot {
                0 => {
                    p.value = Tensor::new(shape, data)?;
                    seen[id.0] = true;
                }
                1 => p.m = data,
                _ => p.v = data,
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("checkpoint lacks parameter {}", model.store.params()[i].name)));
        }
        if r.pos != bytes.len() {
            return Err(parse_err("trailing bytes after the last block".into()));
        }
        Ok((model, manifest))
    }
}

fn masked_mean(t: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 || mask.len() != t.rows() {
        return Err(Error::invalid("mean pooling over no unmasked rows"));
    }
    let mut out = vec![0.0; t.cols()];
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (o, x) in out.iter_mut().zip(t.row(r)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= count as f64);
    Ok(out)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| "block name is not UTF-8".to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::random_embeddings;
    use crate::idtree::TreeMode;

    fn toy() -> (IdentifierTree, Model) {
        let tree = IdentifierTree::build(&random_embeddings(8, 4, 1).unwrap(), 2, 1, TreeMode::Balanced).unwrap();
        let cfg = ModelConfig::for_tree(&tree).with_dim(8);
        let model = Model::new(ModelConfig { n_heads: 2, ..cfg }, 7).unwrap();
        (tree, model)
    }

    #[test]
    fn encoder_shapes_and_truncation() {
        let (_, model) = toy();
        let enc = model.encode(&[3]).unwrap();
        assert_eq!(enc.x.shape(), &[1, 8]);
        let long: Vec<usize> = (0..60).map(|i| i % 8).collect();
        let enc = model.encode(&long).unwrap();
        assert_eq!(enc.x.rows(), 50);
        assert_eq!(model.encode(&long[10..]).unwrap(), enc);
        assert!(model.encode(&[]).is_err());
        assert!(model.encode(&[8]).is_err());
    }

    #[test]
    fn encoder_is_order_sensitive_and_deterministic() {
        let (_, model) = toy();
        let a = model.encode(&[1, 2, 3]).unwrap();
        assert_eq!(a, model.encode(&[1, 2, 3]).unwrap());
        let b = model.encode(&[3, 2, 1]).unwrap();
        let za = masked_mean(&a.x, &a.mask).unwrap();
        let zb = masked_mean(&b.x, &b.mask).unwrap();
        assert!(za.iter().zip(&zb).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn decoder_is_causal() {
        let (tree, model) = toy();
        let enc = model.encode(&[0, 5, 2]).unwrap();
        let empty = model.decode(&enc, &[]).unwrap();
        assert_eq!(empty.y.rows(), 1);
        let path = tree.item_to_identifier(4).unwrap().to_vec();
        let short = model.decode(&enc, &path[..1]).unwrap();
        let long = model.decode(&enc, &path).unwrap();
        assert_eq!(long.y.rows(), path.len() + 1);
        for r in 0..2 {
            for (a, b) in short.y.row(r).iter().zip(long.y.row(r)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert_eq!(short.y.row(0), empty.y.row(0));
        assert!(model.decode(&enc, &[tree.n_tokens()]).is_err());
    }

    #[test]
    fn fully_masked_encoder_is_rejected() {
        let (_, model) = toy();
        let mut enc = model.encode(&[1, 2]).unwrap();
        enc.mask = vec![false, false];
        assert!(model.decode(&enc, &[]).is_err());
        assert!(model.pooled_reps(&enc, &DecoderOutput { y: Tensor::zeros(vec![1, 8]) }).is_err());
    }

    #[test]
    fn step_distribution_examples() {
        let (tree, mut model) = toy();
        assert_eq!(model.step_distribution(&[0.0; 8], &[3]).unwrap(), vec![1.0]);
        assert!(model.step_distribution(&[0.0; 8], &[]).is_err());
        let emb = model.ids.emb;
        let data = model.store.get_mut(emb).value.data_mut();
        for c in 0..8 {
            data[c] = if c == 0 { 1.0 } else { 0.0 };
            data[8 + c] = 0.0;
            data[16 + c] = data[c];
        }
        let mut row = vec![0.0; 8];
        row[0] = 1.0;
        let p = model.step_distribution(&row, &[0, 1]).unwrap();
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let p = model.step_distribution(&row, &[0, 2]).unwrap();
        assert!(p.iter().all(|v| (v - 0.5).abs() < 1e-12));
        let root_kids = tree.children_of_prefix(&[]).unwrap();
        let enc = model.encode(&[1]).unwrap();
        let dec = model.decode(&enc, &[]).unwrap();
        let p = model.step_distribution(dec.y.row(0), root_kids).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pooling_and_similarity() {
        let (_, mut model) = toy();
        let x = Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(masked_mean(&x, &[true, true]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(masked_mean(&x, &[true, false]).unwrap(), vec![1.0, 3.0]);
        let w = model.ids.w_s;
        model.store.get_mut(w).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let z = vec![0.3; 8];
        assert_eq!(model.pair_similarity(&z, &z).unwrap(), 0.5);
        for i in 0..8 {
            model.store.get_mut(w).value.data_mut()[i * 8 + i] = 1.0;
        }
        let mut e1 = vec![0.0; 8];
        e1[0] = 1.0;
        assert!((model.pair_similarity(&e1, &e1).unwrap() - 0.7311).abs() < 1e-4);
        let mut e2 = e1.clone();
        e2[0] = 2.0;
        assert!(model.pair_similarity(&e1, &e2).unwrap() > model.pair_similarity(&e1, &e1).unwrap());
    }

    #[test]
    fn full_identifier_probabilities_sum_to_one() {
        let (tree, model) = toy();
        let enc = model.encode(&[2, 7, 1]).unwrap();
        let mut total = 0.0;
        for item in 0..tree.n_items() {
            let path = tree.item_to_identifier(item).unwrap();
            let dec = model.decode(&enc, path).unwrap();
            let mut lp = 0.0;
            for i in 0..path.len() {
                let cands = tree.children_of_prefix(&path[..i]).unwrap();
                let pos = cands.iter().position(|&c| c == path[i]).unwrap();
                lp += model.step_log_probs(dec.y.row(i), cands).unwrap()[pos];
            }
            total += lp.exp();
        }
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let (tree, model) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, &[("epoch", 3)], true).unwrap();
        let (loaded, manifest) = Model::load(&path, &tree).unwrap();
        assert!(manifest.contains(&("epoch".to_string(), 3)));
        for (a, b) in model.store.params().iter().zip(loaded.store.params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        let other = IdentifierTree::build(&random_embeddings(9, 4, 1).unwrap(), 2, 1, TreeMode::Balanced).unwrap();
        assert!(Model::load(&path, &other).is_err());
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Model::load(&path, &tree), Err(Error::Parse { .. })));
        assert!(matches!(Model::load(dir.path().join("none"), &tree), Err(Error::Io { .. })));
    }
}
