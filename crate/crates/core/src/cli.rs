//! Commands behind the `treeret` binary.
//!
//! Every command reads one flat TOML document (`--config`), applies flag
//! overrides and validates the result before doing any work. Commands that
//! need the user split rebuild it from the same corpus settings and seed, so
//! `build-index`, `train`, `retrieve` and `evaluate` agree without passing
//! split files around.
//!
//! Config keys (all optional):
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `interactions` | none | `user<TAB>item<TAB>timestamp` file; synthetic corpus when absent |
//! | `n_items` | none | catalog size for `interactions` (inferred when absent) |
//! | `synthetic_users`, `synthetic_items` | 2000, 200 | synthetic corpus size |
//! | `min_history_len` | 5 | users with shorter histories are dropped |
//! | `embedding_provider` | `svd` | `svd`, `random` or `file` |
//! | `embeddings_path` | none | whitespace matrix for the `file` provider |
//! | `embedding_dim` | 32 | dimension for `svd`/`random` |
//! | `k`, `tree_mode` | 8, `balanced` | tree branching and mode |
//! | `d`, `n_layers`, `n_heads`, `ffn_dim`, `max_history_len`, `dropout` | 64, 1, 4, 4·d, 50, 0.1 | model |
//! | `lambda_a`, `lambda_r`, `tau`, `q`, `beta`, `l2_weight`, `lr` | 0.05, 0.05, 0.07, 4, 0.001, 1e-6, 0.001 | training |
//! | `batch_size`, `max_epochs`, `patience`, `single_threaded` | 32, 20, 5, false | training loop |
//! | `beam`, `top_n`, `eval_split`, `ks` | 50, 50, `test`, [20, 50] | retrieval and evaluation |
//! | `bench_n_items`, `bench_ks`, `bench_queries`, `bench_d` | [4096], [2, 4, 8, 16, 32], 5, 16 | benchmark grid |
//! | `seed`, `out` | 0, `out` | run seed and output directory |

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_histories, load_interactions, split_users, synthesize_corpus, DatasetSplit, EvalUser};
use crate::embeddings::{load_embeddings, random_embeddings, skewed_embeddings, svd_embeddings, ItemEmbeddings};
use crate::idtree::{IdentifierTree, TreeMode};
use crate::inference::{constrained_beam_search, read_results, retrieve_topn, write_results};
use crate::metrics::{evaluate_split, EvalRecord, MetricTable};
use crate::model::{Model, ModelConfig};
use crate::training::{train, TrainConfig, TrainOutputs};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub n_items: Option<usize>,
    pub synthetic_users: usize,
    pub synthetic_items: usize,
    pub min_history_len: usize,
    pub embedding_provider: String,
    pub embeddings_path: Option<PathBuf>,
    pub embedding_dim: usize,
    pub k: usize,
    pub tree_mode: String,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: Option<usize>,
    pub max_history_len: usize,
    pub dropout: f64,
    pub lambda_a: f64,
    pub lambda_r: f64,
    pub tau: f64,
    pub q: usize,
    pub beta: f64,
    pub l2_weight: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub single_threaded: bool,
    pub beam: usize,
    pub top_n: usize,
    pub eval_split: String,
    pub ks: Vec<usize>,
    pub bench_n_items: Vec<usize>,
    pub bench_ks: Vec<usize>,
    pub bench_queries: usize,
    pub bench_d: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            interactions: None,
            n_items: None,
            synthetic_users: 2000,
            synthetic_items: 200,
            min_history_len: t.min_history_len,
            embedding_provider: "svd".into(),
            embeddings_path: None,
            embedding_dim: 32,
            k: 8,
            tree_mode: "balanced".into(),
            d: 64,
            n_layers: 1,
            n_heads: 4,
            ffn_dim: None,
            max_history_len: 50,
            dropout: 0.1,
            lambda_a: t.lambda_a,
            lambda_r: t.lambda_r,
            tau: t.tau,
            q: t.q,
            beta: t.beta,
            l2_weight: t.l2_weight,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            single_threaded: false,
            beam: 50,
            top_n: 50,
            eval_split: "test".into(),
            ks: vec![20, 50],
            bench_n_items: vec![4096],
            bench_ks: vec![2, 4, 8, 16, 32],
            bench_queries: 5,
            bench_d: 16,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("<config>"),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("config: {m}")));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        self.tree_mode()?;
        if !["svd", "random", "file"].contains(&self.embedding_provider.as_str()) {
            return bad(format!("unknown embedding_provider {}", self.embedding_provider));
        }
        if self.embedding_provider == "file" && self.embeddings_path.is_none() {
            return bad("embedding_provider = \"file\" needs embeddings_path".into());
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2".into());
        }
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad(format!("d={} is not divisible by n_heads={}", self.d, self.n_heads));
        }
        if !["test", "valid"].contains(&self.eval_split.as_str()) {
            return bad(format!("eval_split must be test or valid, got {}", self.eval_split));
        }
        if self.top_n == 0 || self.beam < self.top_n {
            return bad(format!("need beam >= top_n >= 1, got beam {} top_n {}", self.beam, self.top_n));
        }
        if self.ks.is_empty() || self.ks.iter().any(|&k| k == 0 || k > self.top_n) {
            return bad(format!("every K must be in 1..={} (top_n)", self.top_n));
        }
        if self.bench_ks.iter().any(|&k| k < 2) || self.bench_n_items.iter().any(|&n| n == 0) {
            return bad("bench grid needs k >= 2 and N >= 1".into());
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn tree_mode(&self) -> Result<TreeMode> {
        self.tree_mode.parse()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_a: self.lambda_a,
            lambda_r: self.lambda_r,
            tau: self.tau,
            q: self.q,
            beta: self.beta,
            l2_weight: self.l2_weight,
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            min_history_len: self.min_history_len,
            valid_beam: self.beam,
            single_threaded: self.single_threaded,
            ..TrainConfig::default()
        }
    }

    pub fn model_config(&self, tree: &IdentifierTree) -> Result<ModelConfig> {
        if tree.k() != self.k {
            return Err(Error::invalid(format!(
                "config k={} but the tree was built with k={}",
                self.k,
                tree.k()
            )));
        }
        let cfg = ModelConfig {
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim.unwrap_or(4 * self.d),
            max_history_len: self.max_history_len,
            dropout: self.dropout,
            ..ModelConfig::for_tree(tree)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[derive(Debug, Parser)]
#[command(name = "treeret", version, about = "Generative retrieval over identifier trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat TOML config document
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build item embeddings and the identifier tree
    BuildIndex {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        /// balanced or unbalanced
        #[arg(long)]
        tree_mode: Option<String>,
        /// Read item embeddings from this file instead of computing them
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train the model; writes model.ckpt, last.ckpt and train_log.jsonl
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lambda_a: Option<f64>,
        #[arg(long)]
        lambda_r: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        single_threaded: bool,
        /// Continue from a checkpoint, including optimizer state
        #[arg(long)]
        resume_from: Option<PathBuf>,
    },
    /// Beam-search top-n items for the evaluation users
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        top_n: Option<usize>,
        /// test or valid
        #[arg(long)]
        split: Option<String>,
    },
    /// Score a results file against the held-out items
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        results: Option<PathBuf>,
        /// Comma-separated cutoffs, e.g. 20,50
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Depth, expansion and table-size benchmark over an (N, k, mode) grid
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        n_items: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
    },
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the command.
///
/// Returns the text the binary prints on success.
pub fn run_from<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Parse {
        path: PathBuf::from("<args>"),
        line: 0,
        msg: e.to_string(),
    })?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::BuildIndex { common, k, tree_mode, embeddings } => {
            let mut cfg = base_config(&common)?;
            if let Some(k) = k {
                cfg.k = k;
            }
            if let Some(m) = tree_mode {
                cfg.tree_mode = m;
            }
            if let Some(p) = embeddings {
                cfg.embedding_provider = "file".into();
                cfg.embeddings_path = Some(p);
            }
            cmd_build_index(&cfg)
        }
        Command::Train {
            common,
            lambda_a,
            lambda_r,
            max_epochs,
            single_threaded,
            resume_from,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(v) = lambda_a {
                cfg.lambda_a = v;
            }
            if let Some(v) = lambda_r {
                cfg.lambda_r = v;
            }
            if let Some(v) = max_epochs {
                cfg.max_epochs = v;
            }
            cfg.single_threaded |= single_threaded;
            cmd_train(&cfg, resume_from.as_deref())
        }
        Command::Retrieve {
            common,
            checkpoint,
            beam,
            top_n,
            split,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(b) = beam {
                cfg.beam = b;
            }
            if let Some(n) = top_n {
                cfg.top_n = n;
                cfg.ks.retain(|&k| k <= n);
                if cfg.ks.is_empty() {
                    cfg.ks.push(n);
                }
            }
            if let Some(s) = split {
                cfg.eval_split = s;
            }
            let n = cmd_retrieve(&cfg, checkpoint.as_deref())?;
            Ok(serde_json::json!({"users": n, "results": cfg.path("results.jsonl")}).to_string())
        }
        Command::Evaluate { common, results, ks, split } => {
            let mut cfg = base_config(&common)?;
            if let Some(ks) = ks {
                cfg.top_n = cfg.top_n.max(ks.iter().copied().max().unwrap_or(0));
                cfg.beam = cfg.beam.max(cfg.top_n);
                cfg.ks = ks;
            }
            if let Some(s) = split {
                cfg.eval_split = s;
            }
            let table = cmd_evaluate(&cfg, results.as_deref())?;
            Ok(table.to_csv().trim_end().to_string())
        }
        Command::Bench {
            common,
            n_items,
            ks,
            beam,
            queries,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(n) = n_items {
                cfg.bench_n_items = n;
            }
            if let Some(k) = ks {
                cfg.bench_ks = k;
            }
            if let Some(b) = beam {
                cfg.beam = b;
                cfg.top_n = cfg.top_n.min(b);
                cfg.ks.retain(|&k| k <= b);
                if cfg.ks.is_empty() {
                    cfg.ks.push(cfg.top_n);
                }
            }
            if let Some(q) = queries {
                cfg.bench_queries = q;
            }
            let rows = cmd_bench(&cfg)?;
            Ok(bench_csv(&rows).trim_end().to_string())
        }
    }
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

/// Loads or synthesizes the corpus and splits users.
pub fn load_split(cfg: &RunConfig) -> Result<(DatasetSplit, usize)> {
    let (rows, n_items) = match &cfg.interactions {
        Some(p) => {
            let data = load_interactions(p, cfg.n_items)?;
            (data.rows, data.n_items)
        }
        None => (synthesize_corpus(cfg.synthetic_users, cfg.synthetic_items, cfg.seed)?, cfg.synthetic_items),
    };
    let (histories, _) = build_histories(&rows, cfg.min_history_len);
    Ok((split_users(&histories, cfg.seed)?, n_items))
}

fn item_embeddings(cfg: &RunConfig, split: &DatasetSplit, n_items: usize) -> Result<ItemEmbeddings> {
    let emb = match cfg.embedding_provider.as_str() {
        "file" => load_embeddings(cfg.embeddings_path.as_ref().expect("validated"))?,
        "random" => random_embeddings(n_items, cfg.embedding_dim, cfg.seed)?,
        _ => svd_embeddings(&split.train, n_items, cfg.embedding_dim, cfg.seed)?,
    };
    if emb.n_items() != n_items {
        return Err(Error::invalid(format!(
            "embeddings cover {} items but the catalog has {n_items}",
            emb.n_items()
        )));
    }
    Ok(emb)
}

#[derive(Debug, Clone, Serialize)]
struct IndexStats {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "M")]
    m: usize,
    k: usize,
    depth: usize,
    extra_token_rows: usize,
    mode: String,
    build_seconds: f64,
}

/// Writes `tree.json` and `index_stats.json`; returns the stats as JSON.
pub fn cmd_build_index(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let t0 = Instant::now();
    let (split, n_items) = load_split(cfg)?;
    let emb = item_embeddings(cfg, &split, n_items)?;
    let mode = cfg.tree_mode()?;
    let tree = IdentifierTree::build(&emb, cfg.k, cfg.seed, mode)?;
    ensure_out(cfg)?;
    tree.save(cfg.path("tree.json"))?;
    let s = tree.stats();
    let stats = IndexStats {
        n: s.n_items,
        m: s.n_tokens,
        k: s.k,
        depth: s.depth,
        extra_token_rows: s.extra_token_rows,
        mode: mode.to_string(),
        build_seconds: t0.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string(&stats).expect("stats serialize");
    let p = cfg.path("index_stats.json");
    fs::write(&p, format!("{json}\n")).map_err(|e| Error::io(&p, e))?;
    Ok(json)
}

fn load_tree(cfg: &RunConfig) -> Result<IdentifierTree> {
    let tree = IdentifierTree::load(cfg.path("tree.json"))?;
    if tree.k() != cfg.k {
        return Err(Error::invalid(format!("config k={} but the tree was built with k={}", cfg.k, tree.k())));
    }
    Ok(tree)
}

/// Trains from scratch or from `resume`; returns a JSON summary.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<String> {
    cfg.validate()?;
    let tree = load_tree(cfg)?;
    let model_cfg = cfg.model_config(&tree)?;
    let (split, n_items) = load_split(cfg)?;
    if n_items != tree.n_items() {
        return Err(Error::invalid(format!("corpus has {n_items} items, tree has {}", tree.n_items())));
    }
    let (mut model, start_epoch) = match resume {
        Some(p) => {
            let (m, manifest) = Model::load(p, &tree)?;
            if m.config() != &model_cfg {
                return Err(Error::invalid("checkpoint model settings differ from the config"));
            }
            let epoch = manifest.iter().find(|(k, _)| k == "epoch").map_or(0, |(_, v)| *v as usize);
            (m, epoch)
        }
        None => (Model::new(model_cfg, cfg.seed)?, 0),
    };
    ensure_out(cfg)?;
    let outputs = TrainOutputs {
        best_checkpoint: Some(cfg.path("model.ckpt")),
        last_checkpoint: Some(cfg.path("last.ckpt")),
        log: Some(cfg.path("train_log.jsonl")),
    };
    let report = train(&mut model, &tree, &split.train, &split.valid, &cfg.train_config(), &outputs, start_epoch)?;
    Ok(serde_json::json!({
        "best_epoch": report.best_epoch,
        "best_valid_recall_at_50": report.best_valid_recall,
        "epochs_run": report.epochs_run,
        "parameters": model.n_params(),
    })
    .to_string())
}

fn eval_users<'a>(cfg: &RunConfig, split: &'a DatasetSplit) -> &'a [EvalUser] {
    if cfg.eval_split == "valid" {
        &split.valid
    } else {
        &split.test
    }
}

/// Writes `results.jsonl`; returns the number of users.
pub fn cmd_retrieve(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<usize> {
    cfg.validate()?;
    let tree = load_tree(cfg)?;
    let ckpt = checkpoint.map_or_else(|| cfg.path("model.ckpt"), Path::to_path_buf);
    let (model, _) = Model::load(&ckpt, &tree)?;
    let (split, _) = load_split(cfg)?;
    let users = eval_users(cfg, &split);
    let queries: Vec<(u64, &[usize])> = users.iter().map(|u| (u.user_id, u.context.as_slice())).collect();
    let results = retrieve_topn(&model, &tree, &queries, cfg.beam, cfg.top_n.min(tree.n_items()))?;
    ensure_out(cfg)?;
    write_results(cfg.path("results.jsonl"), &results)?;
    Ok(results.len())
}

/// Writes `metrics.csv` and `metrics.json`.
pub fn cmd_evaluate(cfg: &RunConfig, results: Option<&Path>) -> Result<MetricTable> {
    let path = results.map_or_else(|| cfg.path("results.jsonl"), Path::to_path_buf);
    let results = read_results(&path)?;
    cfg.validate()?;
    let (split, _) = load_split(cfg)?;
    let users = eval_users(cfg, &split);
    let mut records = Vec::with_capacity(users.len());
    for u in users {
        let r = results
            .iter()
            .find(|r| r.user_id == u.user_id)
            .ok_or_else(|| Error::invalid(format!("no results for user {}", u.user_id)))?;
        records.push(EvalRecord {
            user_id: u.user_id,
            retrieved: r.items.clone(),
            positives: u.targets.clone(),
        });
    }
    let table = evaluate_split(&records, &cfg.ks)?;
    ensure_out(cfg)?;
    table.write(&cfg.out)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_items: usize,
    pub k: usize,
    pub mode: String,
    pub max_identifier_length: usize,
    pub mean_expansions: f64,
    pub max_expansions: usize,
    pub extra_token_rows: usize,
    pub wall_micros: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "n_items,k,mode,max_identifier_length,mean_expansions,max_expansions,extra_token_rows,wall_micros\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{:.1}\n",
            r.n_items, r.k, r.mode, r.max_identifier_length, r.mean_expansions, r.max_expansions, r.extra_token_rows, r.wall_micros
        ));
    }
    s
}

/// Smallest `l` with `k^l ≥ n`.
pub fn ceil_log(n: usize, k: usize) -> usize {
    let (mut l, mut cap) = (0, 1usize);
    while cap < n {
        cap = cap.saturating_mul(k);
        l += 1;
    }
    l
}

/// Runs the benchmark grid, writes `bench.csv` and checks the structural bounds.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &n in &cfg.bench_n_items {
        let emb = skewed_embeddings(n, 8, cfg.seed)?;
        for &k in &cfg.bench_ks {
            for mode in [TreeMode::Balanced, TreeMode::Unbalanced] {
                let tree = IdentifierTree::build(&emb, k, cfg.seed, mode)?;
                let mcfg = ModelConfig {
                    d: cfg.bench_d,
                    ffn_dim: 4 * cfg.bench_d,
                    n_heads: if cfg.bench_d % 4 == 0 { 4 } else { 1 },
                    dropout: 0.0,
                    ..ModelConfig::for_tree(&tree)
                };
                let model = Model::new(mcfg, cfg.seed)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64 ^ (k as u64) << 32);
                let top_n = cfg.top_n.min(n).min(cfg.beam);
                let mut total = 0usize;
                let mut max_exp = 0usize;
                let t0 = Instant::now();
                for _ in 0..cfg.bench_queries {
                    let hist: Vec<usize> = (0..8).map(|_| rng.random_range(0..n)).collect();
                    let r = constrained_beam_search(&model, &tree, &hist, cfg.beam, top_n)?;
                    total += r.expansions;
                    max_exp = max_exp.max(r.expansions);
                }
                let q = cfg.bench_queries.max(1) as f64;
                let row = BenchRow {
                    n_items: n,
                    k,
                    mode: mode.to_string(),
                    max_identifier_length: tree.depth(),
                    mean_expansions: total as f64 / q,
                    max_expansions: max_exp,
                    extra_token_rows: tree.n_tokens() - n,
                    wall_micros: t0.elapsed().as_secs_f64() * 1e6 / q,
                };
                let bound = cfg.beam * k * tree.depth();
                if max_exp > bound {
                    failures.push(format!("N={n} k={k} {mode}: {max_exp} expansions exceed b*k*l = {bound}"));
                }
                if mode == TreeMode::Balanced && tree.depth() > ceil_log(n, k) + 1 {
                    failures.push(format!("N={n} k={k}: balanced depth {} exceeds ceil(log_k N)+1", tree.depth()));
                }
                rows.push(row);
            }
        }
        let balanced: Vec<&BenchRow> = rows.iter().filter(|r| r.n_items == n && r.mode == "balanced").collect();
        for (b, u) in balanced
            .iter()
            .zip(rows.iter().filter(|r| r.n_items == n && r.mode == "unbalanced"))
        {
            if u.max_identifier_length < b.max_identifier_length {
                failures.push(format!(
                    "N={n} k={}: unbalanced length {} below balanced depth {}",
                    b.k, u.max_identifier_length, b.max_identifier_length
                ));
            }
        }
        let mut by_k: Vec<&&BenchRow> = balanced.iter().collect();
        by_k.sort_by_key(|r| r.k);
        if by_k.windows(2).any(|w| w[1].max_identifier_length > w[0].max_identifier_length) {
            failures.push(format!("N={n}: balanced depth increases with k"));
        }
    }
    ensure_out(cfg)?;
    let p = cfg.path("bench.csv");
    fs::write(&p, bench_csv(&rows)).map_err(|e| Error::io(&p, e))?;
    if !failures.is_empty() {
        return Err(Error::Assertion(failures.join("; ")));
    }
    Ok(rows)
}
