//! Metrics, the Min-Max Score, multi-seed orchestration and the loss
//! ablation suite.
//!
//! Every training step runs on a [`TrainingView`]: the subgraph induced by
//! the nodes the protocol allows during training, renumbered from zero. In
//! transductive mode that is the whole graph; in inductive mode the held-out
//! nodes, their features, labels and edges are absent. Only evaluation sees
//! the full graph.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::distill::{self, DistillConfig, DistillData, Reliability};
use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::poswalk::{self, SkipGram, WalkConfig};
use crate::split::{self, SplitMode, SplitSpec};
use crate::students::{student_forward, StudentArch, StudentKind, StudentModel};
use crate::teacher::{self, TeacherConfig, TeacherModel};
use crate::tensor::NdArray;

/// Fraction of `nodes` whose argmax logit (lowest class on ties) equals the
/// label.
pub fn accuracy(logits: &NdArray, labels: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::invalid("accuracy over an empty node set"));
    }
    let pred = logits.argmax_rows();
    let hits = nodes.iter().filter(|&&v| pred[v] == labels[v]).count();
    Ok(hits as f64 / nodes.len() as f64)
}

/// `(a - min) / (max - min)`; all ones when every value is equal.
pub fn minmax_score(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization,
/// `2 I(a; b) / (H(a) + H(b))`. Two constant labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    if a.is_empty() {
        return 1.0;
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy_of_counts(ca.values(), n);
    let hb = entropy_of_counts(cb.values(), n);
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

/// Population standard deviation over mean; zero for an all-zero vector.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Read access to a graph's nodes. Training views are built through this
/// trait so an access-tracking implementation can audit what training reads.
pub trait NodeSource {
    fn num_nodes(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn num_features(&self) -> usize;
    fn feature_row(&self, v: usize) -> &[f64];
    fn label(&self, v: usize) -> usize;
    fn neighbors_of(&self, v: usize) -> &[usize];
}

impl NodeSource for SparseGraph {
    fn num_nodes(&self) -> usize {
        SparseGraph::num_nodes(self)
    }
    fn num_classes(&self) -> usize {
        SparseGraph::num_classes(self)
    }
    fn num_features(&self) -> usize {
        SparseGraph::num_features(self)
    }
    fn feature_row(&self, v: usize) -> &[f64] {
        self.features().row(v)
    }
    fn label(&self, v: usize) -> usize {
        self.labels()[v]
    }
    fn neighbors_of(&self, v: usize) -> &[usize] {
        self.adj(v)
    }
}

/// The graph available during training, renumbered. `global[i]` is the
/// original id of view node `i`; `local[v]` inverts it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingView {
    pub graph: SparseGraph,
    pub global: Vec<usize>,
    pub local: Vec<Option<usize>>,
    /// Split in view ids; `test` holds the observed unlabeled nodes.
    pub split: SplitSpec,
}

/// Builds the training view, reading only nodes allowed by the protocol.
/// Adjacency lists of allowed nodes are filtered to allowed endpoints.
pub fn training_view(src: &dyn NodeSource, s: &SplitSpec) -> Result<TrainingView> {
    let n = src.num_nodes();
    s.validate(n)?;
    let global: Vec<usize> = match s.mode {
        SplitMode::Transductive => (0..n).collect(),
        SplitMode::Inductive => s.training_nodes(),
    };
    let mut local = vec![None; n];
    for (i, &v) in global.iter().enumerate() {
        local[v] = Some(i);
    }
    let d = src.num_features();
    let mut data = Vec::with_capacity(global.len() * d);
    let mut labels = Vec::with_capacity(global.len());
    let mut edges = Vec::new();
    for (i, &v) in global.iter().enumerate() {
        data.extend_from_slice(src.feature_row(v));
        labels.push(src.label(v));
        for &u in src.neighbors_of(v) {
            if let Some(j) = local[u] {
                if i < j {
                    edges.push((i, j));
                }
            }
        }
    }
    let features = NdArray::matrix(global.len(), d, data)?;
    let graph = SparseGraph::from_edges(global.len(), &edges, features, labels, src.num_classes())?;
    let map = |nodes: &[usize]| -> Vec<usize> {
        let mut out: Vec<usize> = nodes.iter().map(|&v| local[v].expect("training node in view")).collect();
        out.sort_unstable();
        out
    };
    let split = SplitSpec {
        mode: SplitMode::Transductive,
        labeled: map(&s.labeled),
        val: map(&s.val),
        test: map(&s.test),
        inductive: Vec::new(),
    };
    Ok(TrainingView {
        graph,
        global,
        local,
        split,
    })
}

/// Training view under the protocol: in inductive mode the source is the
/// graph with every edge touching a held-out node removed, so no adjacency
/// list read during training names a held-out node.
pub fn view_for(g: &SparseGraph, s: &SplitSpec) -> Result<TrainingView> {
    match s.mode {
        SplitMode::Transductive => training_view(g, s),
        SplitMode::Inductive => training_view(&split::cut_inductive_edges(g, s)?, s),
    }
}

/// A [`NodeSource`] that records every node whose features, label or
/// adjacency were read, and every node named in a returned adjacency list.
pub struct TrackedSource<'a> {
    inner: &'a dyn NodeSource,
    read: RefCell<Vec<bool>>,
    named: RefCell<Vec<bool>>,
}

impl<'a> TrackedSource<'a> {
    pub fn new(inner: &'a dyn NodeSource) -> Self {
        let n = inner.num_nodes();
        Self {
            inner,
            read: RefCell::new(vec![false; n]),
            named: RefCell::new(vec![false; n]),
        }
    }

    fn touch(&self, v: usize) {
        self.read.borrow_mut()[v] = true;
    }

    /// Nodes of `forbidden` that were read or named, sorted and deduplicated.
    pub fn exposed(&self, forbidden: &[usize]) -> Vec<usize> {
        let (read, named) = (self.read.borrow(), self.named.borrow());
        let mut out: Vec<usize> = forbidden.iter().copied().filter(|&v| read[v] || named[v]).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn reads(&self) -> usize {
        self.read.borrow().iter().filter(|&&r| r).count()
    }
}

impl NodeSource for TrackedSource<'_> {
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn num_features(&self) -> usize {
        self.inner.num_features()
    }
    fn feature_row(&self, v: usize) -> &[f64] {
        self.touch(v);
        self.inner.feature_row(v)
    }
    fn label(&self, v: usize) -> usize {
        self.touch(v);
        self.inner.label(v)
    }
    fn neighbors_of(&self, v: usize) -> &[usize] {
        self.touch(v);
        let nbrs = self.inner.neighbors_of(v);
        let mut named = self.named.borrow_mut();
        nbrs.iter().for_each(|&u| named[u] = true);
        nbrs
    }
}

/// Everything one experiment needs, with defaults for a desk-scale run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub labeled_per_class: usize,
    pub val_size: usize,
    pub teacher: TeacherConfig,
    pub walk: WalkConfig,
    pub arch: StudentArch,
    pub distill: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            labeled_per_class: 20,
            val_size: 500,
            teacher: TeacherConfig::default(),
            walk: WalkConfig::default(),
            arch: StudentArch::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl RunConfig {
    /// Copy whose every subsystem is seeded from `seed`. Subsystems draw
    /// from separately labelled streams, so sharing the value is safe.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.teacher.seed = seed;
        c.walk.seed = seed;
        c.distill.seed = seed;
        c
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Artifacts computed from the training view alone.
#[derive(Clone, Debug)]
pub struct ViewArtifacts {
    pub teacher: TeacherModel,
    pub soft: NdArray,
    pub reliability: Reliability,
    /// Positional encodings of the view nodes.
    pub pos: NdArray,
    /// Student inputs of the view nodes.
    pub inputs: NdArray,
}

/// Soft labels, reliability and student inputs for a trained teacher.
pub fn artifacts_from_teacher(view: &TrainingView, teacher: TeacherModel, pos: NdArray, cfg: &RunConfig) -> Result<ViewArtifacts> {
    let g = &view.graph;
    let soft = teacher::soft_labels(&teacher, g, g.features())?;
    let reliability = distill::node_reliability(
        &teacher,
        g,
        g.features(),
        cfg.distill.delta,
        cfg.distill.mc_draws,
        cfg.distill.seed,
    )?;
    let inputs = poswalk::student_input(g.features(), &pos)?;
    Ok(ViewArtifacts {
        teacher,
        soft,
        reliability,
        pos,
        inputs,
    })
}

/// Teacher, soft labels, reliability and positional encodings, all from the
/// training view. The skip-gram model is returned for folding in unseen
/// nodes later.
pub fn train_on_view(view: &TrainingView, cfg: &RunConfig) -> Result<(ViewArtifacts, SkipGram)> {
    let (teacher, _) = teacher::train_teacher(&view.graph, &view.split, &cfg.teacher)?;
    let walk = poswalk::deepwalk(&view.graph, &cfg.walk)?;
    let arts = artifacts_from_teacher(view, teacher, walk.center.clone(), cfg)?;
    Ok((arts, walk))
}

/// Positional encodings for every node of `g`: the view table for view
/// nodes, folded-in rows for the rest.
pub fn full_positions(g: &SparseGraph, view: &TrainingView, walk: &SkipGram, cfg: &WalkConfig) -> Result<NdArray> {
    if view.global.len() == g.num_nodes() {
        let mut pos = NdArray::zeros(&[g.num_nodes(), walk.center.cols()]);
        for (i, &v) in view.global.iter().enumerate() {
            pos.row_mut(v).copy_from_slice(walk.center.row(i));
        }
        return Ok(pos);
    }
    poswalk::fold_in(walk, g, &view.local, cfg)
}

/// Per-seed state shared by every student trained on that seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: String,
    pub seed: u64,
    pub split: SplitSpec,
    pub view: TrainingView,
    pub artifacts: ViewArtifacts,
    pub teacher_test: f64,
    /// Student inputs for every node of the full graph.
    pub inputs_full: NdArray,
    pub labels: Vec<usize>,
    pub config: RunConfig,
}

impl Prepared {
    /// Evaluation-side state from training artifacts. `pos_full` covers every
    /// node of `g`.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        g: &SparseGraph,
        dataset: &str,
        split: SplitSpec,
        view: TrainingView,
        artifacts: ViewArtifacts,
        pos_full: &NdArray,
        config: RunConfig,
        seed: u64,
    ) -> Result<Self> {
        let inputs_full = poswalk::student_input(g.features(), pos_full)?;
        let teacher_logits = teacher::teacher_forward(&artifacts.teacher, g, g.features())?;
        let teacher_test = accuracy(&teacher_logits, g.labels(), split.eval_nodes())?;
        Ok(Self {
            dataset: dataset.to_string(),
            seed,
            split,
            view,
            artifacts,
            teacher_test,
            inputs_full,
            labels: g.labels().to_vec(),
            config,
        })
    }
}

/// Trains the teacher and positional encodings for one seed and readies the
/// full-graph evaluation inputs.
pub fn prepare(g: &SparseGraph, dataset: &str, split: SplitSpec, cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let config = cfg.seeded(seed);
    let view = view_for(g, &split)?;
    let (artifacts, walk) = train_on_view(&view, &config)?;
    let pos_full = full_positions(g, &view, &walk, &config.walk)?;
    Prepared::assemble(g, dataset, split, view, artifacts, &pos_full, config, seed)
}

/// Split for `seed` under `cfg`.
pub fn split_for(g: &SparseGraph, mode: SplitMode, cfg: &RunConfig, seed: u64) -> Result<SplitSpec> {
    split::make_split(g, mode, seed, cfg.labeled_per_class, cfg.val_size)
}

/// One student run. Optional fields are omitted from JSON when absent so
/// identical runs serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub dataset: String,
    pub mode: SplitMode,
    pub seed: u64,
    pub student: StudentKind,
    pub variant: String,
    pub test_acc: f64,
    pub val_acc: f64,
    pub teacher_test_acc: f64,
    pub num_params: usize,
    pub best_epoch: usize,
    pub loss_trace: Vec<f64>,
    /// Per routed layer, the number of evaluated nodes routed to each expert;
    /// each layer sums to `evaluated nodes * active experts`.
    pub expert_load: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_cv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_label_nmi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunResult {
    /// Aggregation key: the student name plus the variant unless it is
    /// the full model.
    pub fn method(&self) -> String {
        if self.variant == "full" {
            self.student.name().to_string()
        } else {
            format!("{} ({})", self.student.name(), self.variant)
        }
    }

    pub fn dataset_key(&self) -> String {
        format!("{}-{}", self.dataset, self.mode.short())
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    fn failed(prep: &Prepared, kind: StudentKind, variant: &str, err: &Error) -> Self {
        Self {
            dataset: prep.dataset.clone(),
            mode: prep.split.mode,
            seed: prep.seed,
            student: kind,
            variant: variant.to_string(),
            test_acc: 0.0,
            val_acc: 0.0,
            teacher_test_acc: prep.teacher_test,
            num_params: 0,
            best_epoch: 0,
            loss_trace: Vec::new(),
            expert_load: Vec::new(),
            load_cv: None,
            expert_label_nmi: None,
            wall_time_s: None,
            error: Some(err.to_string()),
        }
    }
}

/// Routing statistics of a trained student over the evaluation nodes.
fn routing_stats(model: &StudentModel, prep: &Prepared) -> Result<(NdArray, Vec<Vec<usize>>, Option<f64>, Option<f64>)> {
    let (logits, routes) = student_forward(model, &prep.inputs_full)?;
    let eval = prep.split.eval_nodes();
    let mut loads = Vec::with_capacity(routes.len());
    let mut cvs = Vec::with_capacity(routes.len());
    for r in &routes {
        let mut counts = vec![0usize; r.weights.cols()];
        for &v in eval {
            r.active[v].iter().for_each(|&e| counts[e] += 1);
        }
        cvs.push(coefficient_of_variation(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>()));
        loads.push(counts);
    }
    let load_cv = (!cvs.is_empty()).then(|| cvs.iter().sum::<f64>() / cvs.len() as f64);
    let nmi_score = routes.last().map(|r| {
        let top = r.top_expert();
        let a: Vec<usize> = eval.iter().map(|&v| top[v]).collect();
        let b: Vec<usize> = eval.iter().map(|&v| prep.labels[v]).collect();
        nmi(&a, &b)
    });
    Ok((logits, loads, load_cv, nmi_score))
}

/// Trains one student on prepared artifacts and evaluates it on the full
/// graph. `cfg` overrides the prepared distillation config (its seed is
/// forced to the run seed).
pub fn train_and_evaluate(
    prep: &Prepared,
    kind: StudentKind,
    arch: &StudentArch,
    cfg: &DistillConfig,
    variant: &str,
    timing: bool,
) -> Result<(StudentModel, RunResult)> {
    let start = Instant::now();
    let cfg = DistillConfig {
        seed: prep.seed,
        ..cfg.clone()
    };
    let v = &prep.view;
    let data = DistillData {
        graph: &v.graph,
        inputs: &prep.artifacts.inputs,
        labeled: &v.split.labeled,
        val: &v.split.val,
        soft: &prep.artifacts.soft,
        reliability: &prep.artifacts.reliability,
    };
    let (model, traces) = distill::train_student(kind, arch, &data, &cfg)?;
    let (logits, expert_load, load_cv, expert_label_nmi) = routing_stats(&model, prep)?;
    let test_acc = accuracy(&logits, &prep.labels, prep.split.eval_nodes())?;
    let val_acc = accuracy(&logits, &prep.labels, &prep.split.val)?;
    let first = &traces[0];
    let loss_trace = first.pretrain_loss.iter().chain(&first.loss).copied().collect();
    let result = RunResult {
        dataset: prep.dataset.clone(),
        mode: prep.split.mode,
        seed: prep.seed,
        student: kind,
        variant: variant.to_string(),
        test_acc,
        val_acc,
        teacher_test_acc: prep.teacher_test,
        num_params: model.num_params(),
        best_epoch: first.best_epoch,
        loss_trace,
        expert_load,
        load_cv,
        expert_label_nmi,
        wall_time_s: timing.then(|| start.elapsed().as_secs_f64()),
        error: None,
    };
    Ok((model, result))
}

/// Like [`train_and_evaluate`] but a failed run becomes a result line with
/// its error recorded.
pub fn run_student(
    prep: &Prepared,
    kind: StudentKind,
    arch: &StudentArch,
    cfg: &DistillConfig,
    variant: &str,
    timing: bool,
) -> RunResult {
    match train_and_evaluate(prep, kind, arch, cfg, variant, timing) {
        Ok((_, r)) => r,
        Err(e) => {
            warn!("{} seed {} {} failed: {}", kind.name(), prep.seed, variant, e);
            RunResult::failed(prep, kind, variant, &e)
        }
    }
}

/// Runs `job(i)` for `i in 0..count` on up to `threads` workers and returns
/// the outputs in index order.
pub fn parallel_map<T: Send>(count: usize, threads: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, count.max(1));
    if threads == 1 {
        return (0..count).map(&job).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..count).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = job(i);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("job ran"))
        .collect()
}

/// Worker count from `RBM_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("RBM_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub dataset: String,
    pub mode: SplitMode,
    pub kinds: Vec<StudentKind>,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    pub timing: bool,
    pub threads: usize,
}

/// Trains the teacher once per seed, then each student kind; failed runs
/// are kept in the result list and left out of the scoreboard.
pub fn run_experiment(g: &SparseGraph, spec: &ExperimentSpec) -> Result<(Vec<RunResult>, ScoreBoard)> {
    let mut errs = spec.config.distill.problems();
    for &k in &spec.kinds {
        errs.extend(spec.config.arch.validate(k));
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let per_seed = parallel_map(spec.seeds.len(), spec.threads, |i| -> Result<Vec<RunResult>> {
        let seed = spec.seeds[i];
        let split = split_for(g, spec.mode, &spec.config, seed)?;
        let prep = prepare(g, &spec.dataset, split, &spec.config, seed)?;
        Ok(spec
            .kinds
            .iter()
            .map(|&k| run_student(&prep, k, &spec.config.arch, &prep.config.distill, "full", spec.timing))
            .collect())
    });
    let mut results = Vec::new();
    for r in per_seed {
        results.extend(r?);
    }
    let board = ScoreBoard::from_results(&results);
    Ok((results, board))
}

/// The loss ablations: the full objective, each embedding loss removed, and
/// distillation terms only. Nothing else changes.
pub fn ablation_variants(base: &DistillConfig) -> Vec<(&'static str, DistillConfig)> {
    vec![
        ("full", base.clone()),
        (
            "w/o VQ",
            DistillConfig {
                alpha_vq: 0.0,
                ..base.clone()
            },
        ),
        (
            "w/o SS",
            DistillConfig {
                beta_ss: 0.0,
                ..base.clone()
            },
        ),
        (
            "w/o LB",
            DistillConfig {
                gamma_lb: 0.0,
                ..base.clone()
            },
        ),
        (
            "KD-only",
            DistillConfig {
                alpha_vq: 0.0,
                beta_ss: 0.0,
                gamma_lb: 0.0,
                ..base.clone()
            },
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// RbM under every ablation variant on each seed.
pub fn ablation_suite(
    g: &SparseGraph,
    dataset: &str,
    mode: SplitMode,
    base: &RunConfig,
    seeds: &[u64],
    threads: usize,
    timing: bool,
) -> Result<(Vec<RunResult>, Vec<AblationRow>)> {
    base.distill.validate()?;
    let variants = ablation_variants(&base.distill);
    let per_seed = parallel_map(seeds.len(), threads, |i| -> Result<Vec<RunResult>> {
        let seed = seeds[i];
        let prep = prepare(g, dataset, split_for(g, mode, base, seed)?, base, seed)?;
        Ok(variants
            .iter()
            .map(|(name, cfg)| run_student(&prep, StudentKind::Rbm, &base.arch, cfg, name, timing))
            .collect())
    });
    let mut results = Vec::new();
    for r in per_seed {
        results.extend(r?);
    }
    Ok((results.clone(), ablation_table(&results)))
}

/// Mean and standard deviation per variant, in first-seen order.
pub fn ablation_table(results: &[RunResult]) -> Vec<AblationRow> {
    let mut order: Vec<String> = Vec::new();
    let mut accs: HashMap<String, Vec<f64>> = HashMap::new();
    for r in results.iter().filter(|r| r.ok()) {
        if !accs.contains_key(&r.variant) {
            order.push(r.variant.clone());
        }
        accs.entry(r.variant.clone()).or_default().push(r.test_acc);
    }
    order
        .into_iter()
        .map(|v| {
            let a = &accs[&v];
            let (mean, std) = mean_std(a);
            AblationRow {
                variant: v,
                mean,
                std,
                runs: a.len(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: String,
    pub dataset: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub score: f64,
}

/// Per-dataset accuracy statistics and Min-Max Scores per method, plus the
/// median Score of each method across datasets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreBoard {
    pub entries: Vec<MethodStats>,
    pub median_score: BTreeMap<String, f64>,
}

impl ScoreBoard {
    pub fn from_results(results: &[RunResult]) -> Self {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        let mut skipped = 0;
        for r in results {
            if r.ok() {
                groups.entry((r.dataset_key(), r.method())).or_default().push(r.test_acc);
            } else {
                skipped += 1;
            }
        }
        if skipped > 0 {
            warn!("{} failed runs left out of the scoreboard", skipped);
        }
        let mut entries: Vec<MethodStats> = groups
            .into_iter()
            .map(|((dataset, method), accs)| {
                let (mean, std) = mean_std(&accs);
                MethodStats {
                    method,
                    dataset,
                    mean,
                    std,
                    runs: accs.len(),
                    score: 0.0,
                }
            })
            .collect();
        let datasets: Vec<String> = {
            let mut d: Vec<String> = entries.iter().map(|e| e.dataset.clone()).collect();
            d.dedup();
            d
        };
        for d in &datasets {
            let idx: Vec<usize> = (0..entries.len()).filter(|&i| &entries[i].dataset == d).collect();
            let means: Vec<f64> = idx.iter().map(|&i| entries[i].mean).collect();
            for (&i, s) in idx.iter().zip(minmax_score(&means)) {
                entries[i].score = s;
            }
        }
        let mut by_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for e in &entries {
            by_method.entry(e.method.clone()).or_default().push(e.score);
        }
        let median_score = by_method
            .into_iter()
            .map(|(m, mut s)| {
                s.sort_by(f64::total_cmp);
                let n = s.len();
                let med = if n % 2 == 1 {
                    s[n / 2]
                } else {
                    (s[n / 2 - 1] + s[n / 2]) / 2.0
                };
                (m, med)
            })
            .collect();
        Self { entries, median_score }
    }

    /// Markdown table: one row per method, one column per dataset
    /// (accuracy mean ± std in percent with the Score), then the median Score.
    pub fn to_markdown(&self) -> String {
        let mut datasets: Vec<&str> = self.entries.iter().map(|e| e.dataset.as_str()).collect();
        datasets.sort_unstable();
        datasets.dedup();
        let mut out = String::from("| Method |");
        for d in &datasets {
            out.push_str(&format!(" {} |", d));
        }
        out.push_str(" Median Score |\n|---|");
        for _ in &datasets {
            out.push_str("---|");
        }
        out.push_str("---|\n");
        for (method, med) in &self.median_score {
            out.push_str(&format!("| {} |", method));
            for d in &datasets {
                match self.entries.iter().find(|e| &e.method == method && e.dataset == *d) {
                    Some(e) => out.push_str(&format!(
                        " {:.2} ± {:.2} (n={}, Score {:.2}) |",
                        100.0 * e.mean,
                        100.0 * e.std,
                        e.runs,
                        e.score
                    )),
                    None => out.push_str(" - |"),
                }
            }
            out.push_str(&format!(" {:.2} |\n", med));
        }
        out
    }
}

static RESULTS_LOCK: Mutex<()> = Mutex::new(());

/// Appends one JSON line per result. Each line goes out in a single write
/// on an append-mode handle, under a process-wide lock.
pub fn append_results(path: impl AsRef<Path>, results: &[RunResult]) -> Result<()> {
    let _guard = RESULTS_LOCK.lock().expect("results lock");
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in results {
        let mut line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
