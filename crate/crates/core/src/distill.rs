//! Distillation objective, reliability-guided neighbor distillation, the
//! memory annealing schedule, expert initialization and the student
//! training loop.

use std::rc::Rc;

use log::{debug, info, warn};
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::weighted::WeightedIndex;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::nn;
use crate::optim::Adam;
use crate::rng::{self, Rng};
use crate::students::{
    self, ema_update, init_network, ForwardMode, Layer, Network, StudentArch, StudentKind, StudentModel,
};
use crate::teacher::{self, TeacherModel};
use crate::tensor::{entropy, NdArray};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealConfig {
    pub lambda0: f64,
    pub horizon: f64,
    pub delta: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.9,
            horizon: 200.0,
            delta: 0.05,
        }
    }
}

/// Training hyperparameters of a student. Embedding-loss weights are bound
/// to losses by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub nu: f64,
    pub alpha_vq: f64,
    pub beta_ss: f64,
    pub gamma_lb: f64,
    pub delta: f64,
    pub mc_draws: usize,
    pub krd_power: f64,
    pub samples_per_node: usize,
    pub anneal: AnnealConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub input_dropout: f64,
    pub pretrain_epochs: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            nu: 0.5,
            alpha_vq: 0.05,
            beta_ss: 0.01,
            gamma_lb: 0.01,
            delta: 0.1,
            mc_draws: 10,
            krd_power: 1.0,
            samples_per_node: 3,
            anneal: AnnealConfig::default(),
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 200,
            patience: 50,
            dropout: 0.3,
            input_dropout: 0.0,
            pretrain_epochs: 14,
            seed: 0,
        }
    }
}

fn check_range(errs: &mut Vec<String>, name: &str, v: f64, lo: f64, hi: f64) {
    if !(lo..=hi).contains(&v) {
        errs.push(format!("{} = {} outside [{}, {}]", name, v, lo, hi));
    }
}

impl DistillConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        check_range(&mut errs, "nu", self.nu, 0.0, 1.0);
        check_range(&mut errs, "alpha_vq", self.alpha_vq, 0.0, 0.1);
        check_range(&mut errs, "beta_ss", self.beta_ss, 0.0, 0.05);
        check_range(&mut errs, "gamma_lb", self.gamma_lb, 0.0, 0.05);
        if !(self.anneal.delta >= 0.0 && self.anneal.delta < 1.0) {
            errs.push(format!("anneal.delta = {} outside [0, 1)", self.anneal.delta));
        }
        if !(self.anneal.lambda0 > 0.0 && self.anneal.lambda0 <= 1.0) {
            errs.push(format!("anneal.lambda0 = {} outside (0, 1]", self.anneal.lambda0));
        }
        if !(self.anneal.horizon > 0.0) {
            errs.push(format!("anneal.horizon = {} must be positive", self.anneal.horizon));
        }
        if !(self.delta > 0.0) {
            errs.push(format!("delta = {} must be positive", self.delta));
        }
        if self.mc_draws == 0 {
            errs.push("mc_draws must be >= 1".to_string());
        }
        if !(self.krd_power > 0.0) {
            errs.push(format!("krd_power = {} must be positive", self.krd_power));
        }
        if self.samples_per_node == 0 {
            errs.push("samples_per_node must be >= 1".to_string());
        }
        if !(self.lr > 0.0) {
            errs.push(format!("lr = {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("weight_decay = {} must be >= 0", self.weight_decay));
        }
        check_range(&mut errs, "dropout", self.dropout, 0.0, 0.95);
        check_range(&mut errs, "input_dropout", self.input_dropout, 0.0, 0.95);
        if self.epochs == 0 {
            errs.push("epochs must be >= 1".to_string());
        }
        if self.pretrain_epochs >= self.epochs {
            errs.push(format!(
                "pretrain_epochs = {} must be below epochs = {}",
                self.pretrain_epochs, self.epochs
            ));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `lambda(t) = lambda0 + (1 - lambda0) * delta * t / T`, clamped to 1.
pub fn anneal_lambda(t: usize, cfg: &AnnealConfig) -> f64 {
    let l = cfg.lambda0 + (1.0 - cfg.lambda0) * cfg.delta * t as f64 / cfg.horizon;
    l.min(1.0)
}

/// `sum_c t log t` per row of a distribution table; the constant part of
/// the teacher-weighted KL.
fn neg_entropy_rows(t: &NdArray, rows: &[usize]) -> f64 {
    rows.iter()
        .map(|&r| t.row(r).iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .sum()
}

/// `mean_{v in rows} sum_c target[v,c] (log target[v,c] - logp[v,c])` as a
/// tape scalar; `rows` index both `logp` and `target`.
fn kl_rows(tape: &mut Tape, logp: Var, target: &NdArray, rows: &[usize], denom: f64) -> Result<Var> {
    let sel = tape.select_rows(logp, Rc::new(rows.to_vec()))?;
    let t = tape.constant(target.select_rows(rows)?)?;
    let cross = tape.mul(sel, t)?;
    let cross = tape.sum(cross)?;
    let cross = tape.scale(cross, -1.0 / denom)?;
    let c = tape.constant(NdArray::scalar(neg_entropy_rows(target, rows) / denom))?;
    tape.add(cross, c)
}

/// Knowledge-distillation loss: `nu * CE` over `labeled` plus
/// `(1 - nu) * KL(teacher || student)` averaged over `train_nodes`.
pub fn loss_kd(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    soft: &NdArray,
    labeled: &[usize],
    train_nodes: &[usize],
    nu: f64,
) -> Result<Var> {
    let mut parts = Vec::new();
    if nu > 0.0 {
        let ce = nn::cross_entropy(tape, logits, labeled, labels)?;
        parts.push(tape.scale(ce, nu)?);
    }
    if nu < 1.0 {
        if train_nodes.is_empty() {
            return Err(Error::invalid("KL term over an empty node set"));
        }
        let logp = tape.log_softmax(logits)?;
        let kl = kl_rows(tape, logp, soft, train_nodes, train_nodes.len() as f64)?;
        parts.push(tape.scale(kl, 1.0 - nu)?);
    }
    sum_vars(tape, parts)
}

fn sum_vars(tape: &mut Tape, parts: Vec<Var>) -> Result<Var> {
    let mut it = parts.into_iter();
    let mut acc = match it.next() {
        Some(v) => v,
        None => return tape.constant(NdArray::scalar(0.0)),
    };
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Per-node sensitivity of teacher entropy to feature noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Reliability {
    pub rho: Vec<f64>,
    pub rho_max: f64,
}

impl Reliability {
    pub fn new(rho: Vec<f64>) -> Self {
        let rho_max = rho.iter().cloned().fold(0.0, f64::max);
        Self { rho, rho_max }
    }
}

/// `rho_j = (1/delta^2) * mean_m (H(clean_j) - H(noisy_j^m))^2` over `draws`
/// perturbations of the features.
pub fn node_reliability(
    m: &TeacherModel,
    g: &SparseGraph,
    features: &NdArray,
    delta: f64,
    draws: usize,
    seed: u64,
) -> Result<Reliability> {
    if draws == 0 {
        return Err(Error::invalid("reliability needs at least one draw"));
    }
    let clean = teacher::soft_labels(m, g, features)?;
    let h_clean: Vec<f64> = (0..clean.rows()).map(|r| entropy(clean.row(r))).collect();
    let mut acc = vec![0.0; clean.rows()];
    for d in 0..draws {
        let noisy = teacher::perturbed_soft_labels(m, g, features, delta, rng::derive_seed(seed, "reliability", d as u64))?;
        for (r, a) in acc.iter_mut().enumerate() {
            let diff = h_clean[r] - entropy(noisy.row(r));
            *a += diff * diff;
        }
    }
    let scale = 1.0 / (delta * delta * draws as f64);
    Ok(Reliability::new(acc.into_iter().map(|a| a * scale).collect()))
}

/// `p(j) ∝ 1 - (rho_j / rho_max)^power` over `candidates`; uniform when every
/// candidate has zero mass.
pub fn krd_sampling_probs(rel: &Reliability, power: f64, candidates: &[usize]) -> Vec<f64> {
    let mass: Vec<f64> = candidates
        .iter()
        .map(|&j| {
            if rel.rho_max > 0.0 {
                (1.0 - (rel.rho[j] / rel.rho_max).powf(power)).max(0.0)
            } else {
                1.0
            }
        })
        .collect();
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        mass.into_iter().map(|m| m / total).collect()
    } else {
        vec![1.0 / candidates.len() as f64; candidates.len()]
    }
}

/// Draws `samples` neighbors per node from the reliability distribution,
/// node-major. Nodes without neighbors get `None`.
pub fn sample_krd_targets(
    g: &SparseGraph,
    rel: &Reliability,
    power: f64,
    samples: usize,
    r: &mut Rng,
) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(g.num_nodes() * samples);
    for v in 0..g.num_nodes() {
        let nbrs = g.adj(v);
        if nbrs.is_empty() {
            out.extend(std::iter::repeat_n(None, samples));
            continue;
        }
        let p = krd_sampling_probs(rel, power, nbrs);
        let dist = WeightedIndex::new(&p).expect("valid probabilities");
        for _ in 0..samples {
            out.push(Some(nbrs[dist.sample(r)]));
        }
    }
    out
}

/// Reliable neighbor distillation loss,
/// `(1 - nu)/|V| * sum_v mean_{u ~ p(.|rho), u in N(v)} KL(teacher_u || student_v)`,
/// given pre-drawn neighbor samples (`samples` per node, `None` for
/// isolated nodes, which contribute zero).
pub fn loss_krd(
    tape: &mut Tape,
    logits: Var,
    soft: &NdArray,
    drawn: &[Option<usize>],
    samples: usize,
    nu: f64,
) -> Result<Var> {
    let n = tape.value(logits).rows();
    if drawn.len() != n * samples {
        return Err(Error::shape("loss_krd", &[n * samples], &[drawn.len()]));
    }
    let c = soft.cols();
    let mut target = NdArray::zeros(&[n, c]);
    let mut constant = 0.0;
    let mut rows = Vec::new();
    for v in 0..n {
        let picks = &drawn[v * samples..(v + 1) * samples];
        if picks.iter().all(Option::is_none) {
            continue;
        }
        rows.push(v);
        for &u in picks.iter().flatten() {
            let t = soft.row(u);
            for (o, &p) in target.row_mut(v).iter_mut().zip(t) {
                *o += p / samples as f64;
            }
            constant += t.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>() / samples as f64;
        }
    }
    if rows.is_empty() || nu >= 1.0 {
        return tape.constant(NdArray::scalar(0.0));
    }
    let logp = tape.log_softmax(logits)?;
    let sel = tape.select_rows(logp, Rc::new(rows.clone()))?;
    let t = tape.constant(target.select_rows(&rows)?)?;
    let cross = tape.mul(sel, t)?;
    let cross = tape.sum(cross)?;
    let scale = (1.0 - nu) / n as f64;
    let cross = tape.scale(cross, -scale)?;
    let k = tape.constant(NdArray::scalar(constant * scale))?;
    tape.add(cross, k)
}

/// Embedding losses of one routed layer (absent terms are skipped).
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerTerms {
    pub vq: Option<Var>,
    pub ss: Option<Var>,
    pub lb: Option<Var>,
}

/// `KD + KRD + sum_layers (alpha_vq VQ + beta_ss SS + gamma_lb LB)`.
pub fn total_loss(tape: &mut Tape, kd: Var, krd: Var, layers: &[LayerTerms], cfg: &DistillConfig) -> Result<Var> {
    let mut parts = vec![kd, krd];
    for t in layers {
        for (term, w) in [(t.vq, cfg.alpha_vq), (t.ss, cfg.beta_ss), (t.lb, cfg.gamma_lb)] {
            if let (Some(v), true) = (term, w != 0.0) {
                parts.push(tape.scale(v, w)?);
            }
        }
    }
    sum_vars(tape, parts)
}

/// Squared distance between two rows.
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &NdArray, p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = dist2(centers.row(c), p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: NdArray,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

/// k-means++ seeding. When fewer than `k` distinct points exist, the
/// missing centers duplicate chosen ones with `1e-4` jitter.
pub fn kmeans_pp_seed(points: &NdArray, k: usize, r: &mut Rng) -> NdArray {
    let n = points.rows();
    let d = points.cols();
    let mut centers = NdArray::zeros(&[k, d]);
    let first = r.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            centers.row_mut(c).copy_from_slice(points.row(pick));
        } else {
            warn!("k-means: fewer distinct inputs than experts; duplicating a center with jitter");
            let src = r.random_range(0..c);
            let jittered: Vec<f64> = centers.row(src).iter().map(|&v| v + r.random_range(-1e-4..1e-4)).collect();
            centers.row_mut(c).copy_from_slice(&jittered);
        }
        for (i, e) in d2.iter_mut().enumerate() {
            *e = e.min(dist2(points.row(i), centers.row(c)));
        }
    }
    centers
}

/// Lloyd iterations from given centers; ties go to the lower center index
/// and empty clusters keep their center.
pub fn lloyd(points: &NdArray, mut centers: NdArray, max_iter: usize) -> KMeans {
    let (n, d, k) = (points.rows(), points.cols(), centers.rows());
    let mut assignment: Vec<usize> = (0..n).map(|i| nearest(&centers, points.row(i)).0).collect();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, &s) in centers.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(&centers, points.row(i)).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    KMeans {
        centers,
        assignment,
        iterations,
    }
}

pub const KMEANS_MAX_ITER: usize = 100;

/// k-means++ then Lloyd on the rows of `points`.
pub fn kmeans(points: &NdArray, k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || points.rows() == 0 {
        return Err(Error::invalid("k-means needs k >= 1 and at least one point"));
    }
    let mut r = rng::stream(seed, "kmeans", 0);
    let centers = kmeans_pp_seed(points, k, &mut r);
    Ok(lloyd(points, centers, KMEANS_MAX_ITER))
}

fn l2_rows(x: &NdArray) -> NdArray {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Sets each RbM layer's memory to k-means centers of its L2-normalized
/// inputs over `x`. Layers are processed in order with the current weights.
pub fn kmeans_expert_init(net: &mut Network, x: &NdArray, seed: u64) -> Result<()> {
    let (_, _, inputs) = net.predict(x)?;
    let mut li = 0;
    for (idx, layer) in net.layers.iter_mut().enumerate() {
        if let Layer::Rbm(l) = layer {
            let pts = l2_rows(&inputs[li]);
            let km = kmeans(&pts, l.experts.len(), rng::derive_seed(seed, "kmeans.layer", idx as u64))?;
            l.q = km.centers;
            li += 1;
        } else if let Layer::Moe(_) = layer {
            li += 1;
        }
    }
    Ok(())
}

/// Copies expert 0 (weights, bias and input scale) to every other expert.
pub fn clone_first_expert(net: &mut Network) {
    for layer in &mut net.layers {
        let att = match layer {
            Layer::Rbm(l) => Some(&mut l.att),
            Layer::Moe(l) => Some(&mut l.att),
            Layer::Dense(_) => None,
        };
        if let Some(att) = att {
            let first = att.row(0).to_vec();
            for r in 1..att.rows() {
                att.row_mut(r).copy_from_slice(&first);
            }
        }
        let experts = layer.experts_mut();
        let first = experts[0].clone();
        experts.iter_mut().skip(1).for_each(|e| *e = first.clone());
    }
}

/// Inputs and targets of one student training run, all indexed in the same
/// (training-view) node numbering.
pub struct DistillData<'a> {
    pub graph: &'a SparseGraph,
    pub inputs: &'a NdArray,
    pub labeled: &'a [usize],
    pub val: &'a [usize],
    pub soft: &'a NdArray,
    pub reliability: &'a Reliability,
}

impl DistillData<'_> {
    fn check(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        if self.inputs.rows() != n || self.soft.rows() != n || self.reliability.rho.len() != n {
            return Err(Error::invalid(format!(
                "distillation data rows disagree: graph {}, inputs {}, soft labels {}, reliability {}",
                n,
                self.inputs.rows(),
                self.soft.rows(),
                self.reliability.rho.len()
            )));
        }
        if self.labeled.is_empty() || self.val.is_empty() {
            return Err(Error::invalid("student training needs nonempty labeled and val sets"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub pretrain_loss: Vec<f64>,
    pub loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Which loss terms an epoch includes.
#[derive(Clone, Copy)]
struct Phase {
    forced_expert: Option<usize>,
    embedding_losses: bool,
}

/// One optimizer step; returns the loss and the routing/inputs used for the
/// memory update.
fn train_step(
    net: &mut Network,
    opt: &mut Adam,
    data: &DistillData,
    cfg: &DistillConfig,
    all_nodes: &[usize],
    phase: Phase,
    epoch_key: u64,
) -> Result<(f64, Vec<(NdArray, students::RoutingResult)>)> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape)?;
    let x = tape.constant(data.inputs.clone())?;
    let mut drop_rng = rng::stream(cfg.seed, "student.dropout", epoch_key);
    let mut mode = ForwardMode {
        training: true,
        dropout: cfg.dropout,
        input_dropout: cfg.input_dropout,
        rng: Some(&mut drop_rng),
        forced_expert: phase.forced_expert,
    };
    let out = net.forward(&mut tape, &vars, x, &mut mode)?;
    let kd = loss_kd(
        &mut tape,
        out.logits,
        data.graph.labels(),
        data.soft,
        data.labeled,
        all_nodes,
        cfg.nu,
    )?;
    let mut krd_rng = rng::stream(cfg.seed, "student.krd", epoch_key);
    let drawn = sample_krd_targets(
        data.graph,
        data.reliability,
        cfg.krd_power,
        cfg.samples_per_node,
        &mut krd_rng,
    );
    let krd = loss_krd(&mut tape, out.logits, data.soft, &drawn, cfg.samples_per_node, cfg.nu)?;
    let mut terms = Vec::new();
    if phase.embedding_losses {
        for l in &out.routing {
            let mut t = LayerTerms::default();
            if l.is_rbm {
                if cfg.alpha_vq != 0.0 {
                    t.vq = Some(students::loss_vq(&mut tape, l.q, l.input, l.gate)?);
                }
                if cfg.beta_ss != 0.0 {
                    t.ss = Some(students::loss_ss(&mut tape, l.q)?);
                }
            }
            if cfg.gamma_lb != 0.0 {
                t.lb = Some(students::loss_lb(&mut tape, l.gate)?);
            }
            terms.push(t);
        }
    }
    let loss = total_loss(&mut tape, kd, krd, &terms, cfg)?;
    let lv = tape.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::Diverged {
            epoch: epoch_key as usize,
            detail: format!("student loss {}", lv),
        });
    }
    let mut grads = tape.backward(loss)?;
    let g: Vec<NdArray> = vars.iter().map(|&v| grads.take(v)).collect();
    let routed: Vec<(NdArray, students::RoutingResult)> = out
        .routing
        .iter()
        .map(|l| (tape.value(l.input).clone(), l.routing.clone()))
        .collect();
    opt.step(&mut net.params_mut(), &g);
    Ok((lv, routed))
}

fn val_accuracy(net: &Network, data: &DistillData) -> Result<f64> {
    let (logits, _, _) = net.predict(data.inputs)?;
    Ok(nn::accuracy_of(&logits.argmax_rows(), data.graph.labels(), data.val))
}

/// Forced-to-expert-0 pretraining on KD + KRD, then expert cloning. The
/// caller resets the optimizer.
pub fn pretrain_clone(net: &mut Network, opt: &mut Adam, data: &DistillData, cfg: &DistillConfig) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..data.graph.num_nodes()).collect();
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    for e in 0..cfg.pretrain_epochs {
        let phase = Phase {
            forced_expert: Some(0),
            embedding_losses: false,
        };
        let (lv, _) = train_step(net, opt, data, cfg, &all, phase, (1 << 32) + e as u64)?;
        losses.push(lv);
    }
    clone_first_expert(net);
    Ok(losses)
}

fn train_network(
    kind: StudentKind,
    arch: &StudentArch,
    data: &DistillData,
    cfg: &DistillConfig,
) -> Result<(Network, TrainTrace)> {
    let mut net = init_network(kind, arch, data.inputs.cols(), data.graph.num_classes(), cfg.seed);
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay).with_no_decay(net.decay_exempt());
    let mut trace = TrainTrace::default();
    let routed = kind.has_router();
    if routed {
        trace.pretrain_loss = pretrain_clone(&mut net, &mut opt, data, cfg)?;
        opt.reset();
        if kind == StudentKind::Rbm {
            kmeans_expert_init(&mut net, data.inputs, cfg.seed)?;
        }
    }
    let main_epochs = if routed { cfg.epochs - cfg.pretrain_epochs } else { cfg.epochs };
    let all: Vec<usize> = (0..data.graph.num_nodes()).collect();
    let mut best = (net.clone(), f64::NEG_INFINITY, 0);
    let mut since_best = 0;
    for epoch in 0..main_epochs {
        let phase = Phase {
            forced_expert: None,
            embedding_losses: routed,
        };
        let (lv, routing) = train_step(&mut net, &mut opt, data, cfg, &all, phase, epoch as u64)?;
        if kind == StudentKind::Rbm {
            let lambda = anneal_lambda(epoch, &cfg.anneal);
            let mut it = routing.iter();
            for layer in &mut net.layers {
                if let Layer::Rbm(l) = layer {
                    let (h, r) = it.next().expect("one routing per routed layer");
                    ema_update(&mut l.q, h, r, lambda)?;
                }
            }
        }
        let val = val_accuracy(&net, data)?;
        debug!("{} epoch {} loss {:.4} val {:.4}", kind.name(), epoch, lv, val);
        trace.loss.push(lv);
        trace.val_acc.push(val);
        if val > best.1 {
            best = (net.clone(), val, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    trace.best_epoch = best.2;
    trace.best_val = best.1;
    Ok((best.0, trace))
}

/// Seed of ensemble member `i`; member 0 shares the run seed so a
/// one-member ensemble is the MLP.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    if i == 0 {
        seed
    } else {
        rng::derive_seed(seed, "ensemble.member", i as u64)
    }
}

/// Trains a student of `kind`. Ensemble members are trained independently
/// as MLPs with their own seeds.
pub fn train_student(
    kind: StudentKind,
    arch: &StudentArch,
    data: &DistillData,
    cfg: &DistillConfig,
) -> Result<(StudentModel, Vec<TrainTrace>)> {
    let mut errs = cfg.problems();
    errs.extend(arch.validate(kind));
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    data.check()?;
    let members = if kind == StudentKind::Ensemble { arch.members } else { 1 };
    let mut nets = Vec::with_capacity(members);
    let mut traces = Vec::with_capacity(members);
    for i in 0..members {
        let member_cfg = DistillConfig {
            seed: member_seed(cfg.seed, i),
            ..cfg.clone()
        };
        let base = if kind == StudentKind::Ensemble { StudentKind::Mlp } else { kind };
        let (net, trace) = train_network(base, arch, data, &member_cfg)?;
        info!(
            "{} member {} best val {:.4} at epoch {}",
            kind.name(),
            i,
            trace.best_val,
            trace.best_epoch
        );
        nets.push(net);
        traces.push(trace);
    }
    Ok((StudentModel { kind, members: nets }, traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_examples() {
        let cfg = AnnealConfig::default();
        assert_eq!(anneal_lambda(0, &cfg), 0.9);
        assert!((anneal_lambda(200, &cfg) - 0.905).abs() < 1e-12);
        let flat = AnnealConfig { delta: 0.0, ..cfg.clone() };
        assert_eq!(anneal_lambda(1000, &flat), 0.9);
        let steep = AnnealConfig { delta: 0.9, horizon: 1.0, ..cfg };
        assert_eq!(anneal_lambda(1000, &steep), 1.0);
    }

    #[test]
    fn sampling_probs_examples() {
        let rel = Reliability::new(vec![0.0, 0.5, 1.0]);
        let p = krd_sampling_probs(&rel, 1.0, &[0, 1, 2]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
        let p = krd_sampling_probs(&rel, 1.0, &[2]);
        assert_eq!(p, vec![1.0]);
        let flat = Reliability::new(vec![0.0; 3]);
        assert_eq!(krd_sampling_probs(&flat, 2.0, &[0, 1]), vec![0.5, 0.5]);
    }

    #[test]
    fn kd_pure_ce_and_self_kl() {
        let logits = NdArray::from_rows(&[vec![1.0, -1.0], vec![0.3, 0.2]]).unwrap();
        let soft = logits.softmax_rows();
        let labels = [0, 1];
        let mut t = Tape::new();
        let l = t.constant(logits.clone()).unwrap();
        let kd = loss_kd(&mut t, l, &labels, &soft, &[0, 1], &[0, 1], 0.0).unwrap();
        assert!(t.value(kd).item().abs() < 1e-14);
        let ce = loss_kd(&mut t, l, &labels, &soft, &[0, 1], &[0, 1], 1.0).unwrap();
        let logp = |r: usize, c: usize| {
            let row = logits.row(r);
            row[c] - row.iter().map(|v| v.exp()).sum::<f64>().ln()
        };
        let expected = -(logp(0, 0) + logp(1, 1)) / 2.0;
        assert!((t.value(ce).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn config_reports_all_violations() {
        let cfg = DistillConfig {
            nu: 2.0,
            alpha_vq: 0.5,
            gamma_lb: -0.1,
            samples_per_node: 0,
            ..Default::default()
        };
        assert_eq!(cfg.problems().len(), 4);
        assert!(DistillConfig::default().validate().is_ok());
    }

    #[test]
    fn kmeans_recovers_duplicated_points() {
        let pts = NdArray::from_rows(&[
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let km = kmeans(&pts, 3, 4).unwrap();
        let mut centers: Vec<Vec<f64>> = (0..3).map(|r| km.centers.row(r).to_vec()).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, vec![vec![-1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let one = kmeans(&pts, 1, 0).unwrap();
        assert!((one.centers.get(0, 0) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn kmeans_with_too_few_distinct_points_jitters() {
        let pts = NdArray::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let km = kmeans(&pts, 2, 0).unwrap();
        assert_ne!(km.centers.row(0), km.centers.row(1));
    }
}
