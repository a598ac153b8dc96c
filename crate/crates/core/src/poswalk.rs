//! DeepWalk positional encodings: uniform random walks and skip-gram with
//! negative sampling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::weighted::WeightedAliasIndex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::rng::{self, Rng};
use crate::tensor::NdArray;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    pub dim: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            walks_per_node: 10,
            walk_length: 40,
            window: 5,
            dim: 16,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("walks_per_node", self.walks_per_node),
            ("walk_length", self.walk_length),
            ("window", self.window),
            ("negatives", self.negatives),
        ] {
            if v == 0 {
                errs.push(format!("poswalk {} must be >= 1", name));
            }
        }
        if self.window >= self.walk_length {
            errs.push(format!(
                "poswalk window {} must be below walk_length {}",
                self.window, self.walk_length
            ));
        }
        if !(self.lr > 0.0) {
            errs.push(format!("poswalk lr {} must be positive", self.lr));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn walk_from(g: &SparseGraph, start: usize, length: usize, r: &mut Rng) -> Vec<usize> {
    let mut walk = Vec::with_capacity(length);
    walk.push(start);
    let mut cur = start;
    while walk.len() < length {
        let nbrs = g.adj(cur);
        if nbrs.is_empty() {
            break;
        }
        cur = nbrs[r.random_range(0..nbrs.len())];
        walk.push(cur);
    }
    walk
}

/// `walks_per_node` walks from every node, pass-major. Each walk has its own
/// stream keyed by (pass, start), so shards can be generated independently.
pub fn random_walks(g: &SparseGraph, cfg: &WalkConfig) -> Vec<Vec<usize>> {
    walks_from(g, &(0..g.num_nodes()).collect::<Vec<_>>(), cfg)
}

fn walks_from(g: &SparseGraph, starts: &[usize], cfg: &WalkConfig) -> Vec<Vec<usize>> {
    let n = g.num_nodes() as u64;
    let mut walks = Vec::with_capacity(cfg.walks_per_node * starts.len());
    for pass in 0..cfg.walks_per_node {
        for &v in starts {
            let mut r = rng::stream(cfg.seed, "poswalk.walk", pass as u64 * n + v as u64);
            walks.push(walk_from(g, v, cfg.walk_length, &mut r));
        }
    }
    walks
}

/// Skip-gram state. `center` is the positional table; `context` and
/// `counts` are kept so unseen nodes can be folded in later.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipGram {
    pub center: NdArray,
    pub context: NdArray,
    pub counts: Vec<u64>,
    pub epoch_loss: Vec<f64>,
}

fn init_rows(table: &mut NdArray, rows: impl Iterator<Item = usize>, r: &mut Rng) {
    let p = table.cols();
    let a = 0.5 / p as f64;
    for v in rows {
        for x in table.row_mut(v) {
            *x = r.random_range(-a..a);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logistic loss of one (center, context) pair. The center step is
/// accumulated into `grad`; the context row is updated in place if allowed.
fn sgns_pair(center: &[f64], context: &mut [f64], grad: &mut [f64], pos: bool, lr: f64, update_context: bool) -> f64 {
    let dot: f64 = center.iter().zip(context.iter()).map(|(a, b)| a * b).sum();
    let s = sigmoid(dot);
    let (g, loss) = if pos {
        (1.0 - s, -s.max(1e-300).ln())
    } else {
        (-s, -(1.0 - s).max(1e-300).ln())
    };
    let step = lr * g;
    for (gr, &o) in grad.iter_mut().zip(context.iter()) {
        *gr += step * o;
    }
    if update_context {
        for (o, &c) in context.iter_mut().zip(center.iter()) {
            *o += step * c;
        }
    }
    loss
}

struct Corpus<'a> {
    walks: &'a [Vec<usize>],
    noise: WeightedAliasIndex<f64>,
    noise_ids: Vec<usize>,
}

/// Runs SGNS epochs. Only centers in `trainable` are updated. With
/// `update_context` unset, context rows are frozen and pairs whose context
/// is itself trainable are skipped.
fn run_sgns(
    model: &mut SkipGram,
    corpus: &Corpus,
    cfg: &WalkConfig,
    stream_label: &str,
    trainable: &[bool],
    update_context: bool,
) {
    let p = model.center.cols();
    let total_pairs_est: usize = corpus.walks.iter().map(|w| w.len()).sum::<usize>() * cfg.epochs;
    let mut seen = 0usize;
    let mut grad = vec![0.0; p];
    let mut ctx_buf = vec![0.0; p];
    let mut cen = vec![0.0; p];
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, stream_label, epoch as u64);
        let mut order: Vec<usize> = (0..corpus.walks.len()).collect();
        order.shuffle(&mut r);
        for walk in order.iter().map(|&w| &corpus.walks[w]) {
            for (i, &c) in walk.iter().enumerate() {
                let lr = cfg.lr * (1.0 - seen as f64 / total_pairs_est.max(1) as f64).max(1e-4);
                seen += 1;
                if !trainable[c] {
                    continue;
                }
                // Effective window drawn per center, as in word2vec.
                let b = r.random_range(1..=cfg.window);
                let lo = i.saturating_sub(b);
                let hi = (i + b + 1).min(walk.len());
                for (j, &o) in walk.iter().enumerate().take(hi).skip(lo) {
                    if j == i || (!update_context && trainable[o]) {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    cen.copy_from_slice(model.center.row(c));
                    for neg in 0..=cfg.negatives {
                        let (target, pos) = if neg == 0 {
                            (o, true)
                        } else {
                            let t = corpus.noise_ids[corpus.noise.sample(&mut r)];
                            if t == o {
                                continue;
                            }
                            (t, false)
                        };
                        if !update_context && trainable[target] {
                            continue;
                        }
                        ctx_buf.copy_from_slice(model.context.row(target));
                        sgns_pair(&cen, &mut ctx_buf, &mut grad, pos, lr, update_context);
                        if update_context {
                            model.context.row_mut(target).copy_from_slice(&ctx_buf);
                        }
                    }
                    for (x, g) in model.center.row_mut(c).iter_mut().zip(&grad) {
                        *x += g;
                    }
                }
            }
        }
        model.epoch_loss.push(objective(model, corpus, cfg, trainable, update_context));
    }
}

/// Walks scored by [`objective`]; a fixed prefix keeps the score cheap.
const OBJECTIVE_WALKS: usize = 1000;

/// Mean SGNS loss per (center, context) pair over a fixed sample of the
/// corpus with fixed negatives. The running loss seen during an epoch is
/// biased low by updates from the same walk, so progress is tracked with
/// this instead.
fn objective(model: &SkipGram, corpus: &Corpus, cfg: &WalkConfig, trainable: &[bool], update_context: bool) -> f64 {
    let mut r = rng::stream(cfg.seed, "poswalk.objective", 0);
    let p = model.center.cols();
    let (mut total, mut pairs) = (0.0, 0usize);
    let mut scratch = vec![0.0; p];
    let mut ctx = vec![0.0; p];
    for walk in corpus.walks.iter().take(OBJECTIVE_WALKS) {
        for (i, &c) in walk.iter().enumerate() {
            if !trainable[c] {
                continue;
            }
            let b = r.random_range(1..=cfg.window);
            let lo = i.saturating_sub(b);
            let hi = (i + b + 1).min(walk.len());
            for (j, &o) in walk.iter().enumerate().take(hi).skip(lo) {
                if j == i || (!update_context && trainable[o]) {
                    continue;
                }
                for neg in 0..=cfg.negatives {
                    let (target, pos) = if neg == 0 {
                        (o, true)
                    } else {
                        (corpus.noise_ids[corpus.noise.sample(&mut r)], false)
                    };
                    if target == o && !pos || !update_context && trainable[target] {
                        continue;
                    }
                    ctx.copy_from_slice(model.context.row(target));
                    total += sgns_pair(model.center.row(c), &mut ctx, &mut scratch, pos, 0.0, false);
                }
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

fn noise_table(counts: &[u64], allowed: impl Fn(usize) -> bool) -> Result<(WeightedAliasIndex<f64>, Vec<usize>)> {
    let ids: Vec<usize> = (0..counts.len()).filter(|&v| counts[v] > 0 && allowed(v)).collect();
    let weights: Vec<f64> = ids.iter().map(|&v| (counts[v] as f64).powf(0.75)).collect();
    let alias = WeightedAliasIndex::new(weights).map_err(|e| Error::invalid(format!("noise table: {}", e)))?;
    Ok((alias, ids))
}

/// Skip-gram with negative sampling over `walks` on `num_nodes` nodes.
/// Negatives follow the unigram distribution raised to 0.75.
pub fn train_skipgram(walks: &[Vec<usize>], num_nodes: usize, cfg: &WalkConfig) -> Result<SkipGram> {
    cfg.validate()?;
    if !walks.iter().any(|w| w.len() >= 2) {
        return Err(Error::invalid("skip-gram needs at least one walk of length >= 2"));
    }
    let mut counts = vec![0u64; num_nodes];
    for &v in walks.iter().flatten() {
        if v >= num_nodes {
            return Err(Error::NodeOutOfRange { index: v, num_nodes });
        }
        counts[v] += 1;
    }
    let mut center = NdArray::zeros(&[num_nodes, cfg.dim]);
    let mut r = rng::stream(cfg.seed, "poswalk.init", 0);
    init_rows(&mut center, 0..num_nodes, &mut r);
    let mut model = SkipGram {
        center,
        context: NdArray::zeros(&[num_nodes, cfg.dim]),
        counts,
        epoch_loss: Vec::new(),
    };
    if cfg.dim == 0 || cfg.epochs == 0 {
        return Ok(model);
    }
    let (noise, noise_ids) = noise_table(&model.counts, |_| true)?;
    let corpus = Corpus {
        walks,
        noise,
        noise_ids,
    };
    run_sgns(&mut model, &corpus, cfg, "poswalk.sgns", &vec![true; num_nodes], true);
    Ok(model)
}

/// Walks plus skip-gram on `g`.
pub fn deepwalk(g: &SparseGraph, cfg: &WalkConfig) -> Result<SkipGram> {
    let walks = random_walks(g, cfg);
    if !walks.iter().any(|w| w.len() >= 2) {
        // Edgeless graph: nothing to learn, keep the initialization.
        let zero = WalkConfig { epochs: 0, ..cfg.clone() };
        let padded: Vec<Vec<usize>> = vec![vec![0, 0]];
        let mut m = train_skipgram(&padded, g.num_nodes().max(1), &zero)?;
        m.counts = vec![0; g.num_nodes()];
        return Ok(m);
    }
    train_skipgram(&walks, g.num_nodes(), cfg)
}

/// Positional rows for nodes unseen during training.
///
/// `full` is the whole graph and `known[v]` maps a full-graph node to its row
/// in `model` (None for unseen nodes). Walks start at every unseen node on
/// the full graph; only the unseen nodes' center rows are trained, against
/// the frozen context rows of known nodes, so the new rows share the
/// coordinate system of the existing table.
pub fn fold_in(model: &SkipGram, full: &SparseGraph, known: &[Option<usize>], cfg: &WalkConfig) -> Result<NdArray> {
    cfg.validate()?;
    let n = full.num_nodes();
    if known.len() != n {
        return Err(Error::shape("fold_in", &[n], &[known.len()]));
    }
    let p = model.center.cols();
    let mut center = NdArray::zeros(&[n, p]);
    let mut context = NdArray::zeros(&[n, p]);
    let mut counts = vec![0u64; n];
    let mut unseen = Vec::new();
    for (v, k) in known.iter().enumerate() {
        match *k {
            Some(i) => {
                center.row_mut(v).copy_from_slice(model.center.row(i));
                context.row_mut(v).copy_from_slice(model.context.row(i));
                counts[v] = model.counts[i];
            }
            None => unseen.push(v),
        }
    }
    let mut r = rng::stream(cfg.seed, "poswalk.foldin.init", 0);
    init_rows(&mut center, unseen.iter().copied(), &mut r);
    let mut folded = SkipGram {
        center,
        context,
        counts,
        epoch_loss: Vec::new(),
    };
    if unseen.is_empty() || p == 0 || !folded.counts.iter().any(|&c| c > 0) {
        return Ok(folded.center);
    }
    let mut trainable = vec![false; n];
    unseen.iter().for_each(|&v| trainable[v] = true);
    let walks = walks_from(full, &unseen, cfg);
    let (noise, noise_ids) = noise_table(&folded.counts, |v| !trainable[v])?;
    let corpus = Corpus {
        walks: &walks,
        noise,
        noise_ids,
    };
    run_sgns(&mut folded, &corpus, cfg, "poswalk.foldin", &trainable, false);
    Ok(folded.center)
}

/// Row-wise `[features | pos]`.
pub fn student_input(features: &NdArray, pos: &NdArray) -> Result<NdArray> {
    features.concat_cols(pos)
}

pub fn write_table_csv(table: &NdArray, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for r in 0..table.rows() {
        let row: Vec<String> = table.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", row.join(",")).unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_table_csv(path: impl AsRef<Path>) -> Result<NdArray> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        rows.push(row);
    }
    NdArray::from_rows(&rows)
}
