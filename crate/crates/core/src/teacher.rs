//! Two-layer GCN and GraphSAGE-mean teachers and their soft labels.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{AdjacencyScheme, SparseGraph};
use crate::nn;
use crate::optim::Adam;
use crate::rng;
use crate::sparse::CsrMatrix;
use crate::split::SplitSpec;
use crate::tensor::NdArray;

pub const CHECKPOINT_VERSION: &str = "teacher-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Gcn,
    Sage,
}

impl TeacherKind {
    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::Gcn => "gcn",
            TeacherKind::Sage => "sage",
        }
    }
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Self::Gcn),
            "sage" => Ok(Self::Sage),
            other => Err(Error::invalid(format!("unknown teacher kind {:?} (expected gcn|sage)", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Gcn,
            hidden: 64,
            dropout: 0.5,
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 200,
            patience: 30,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.hidden == 0 {
            errs.push("teacher hidden must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("teacher dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0) {
            errs.push(format!("teacher lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("teacher weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.epochs == 0 {
            errs.push("teacher epochs must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Weights of a 2-layer teacher. For SAGE each weight stacks the self block
/// on top of the neighbor block, so `w1` is `2d x H` and `w2` is `2H x C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherModel {
    pub kind: TeacherKind,
    pub hidden: usize,
    pub dropout: f64,
    pub w1: NdArray,
    pub b1: NdArray,
    pub w2: NdArray,
    pub b2: NdArray,
}

/// Propagation operator for `kind`; built once per graph.
pub fn propagation(kind: TeacherKind, g: &SparseGraph) -> Rc<CsrMatrix> {
    Rc::new(match kind {
        TeacherKind::Gcn => g.normalized_adjacency(AdjacencyScheme::Gcn),
        TeacherKind::Sage => g.normalized_adjacency(AdjacencyScheme::RowMean),
    })
}

struct Params {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

fn layer(
    tape: &mut Tape,
    kind: TeacherKind,
    adj: &Rc<CsrMatrix>,
    h: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let out = match kind {
        TeacherKind::Gcn => {
            let xw = tape.matmul(h, w)?;
            tape.spmm(adj.clone(), xw)?
        }
        TeacherKind::Sage => {
            let d = tape.value(h).cols();
            let w_self = tape.slice_rows(w, 0, d)?;
            let w_neigh = tape.slice_rows(w, d, 2 * d)?;
            let own = tape.matmul(h, w_self)?;
            let hn = tape.matmul(h, w_neigh)?;
            let agg = tape.spmm(adj.clone(), hn)?;
            tape.add(own, agg)?
        }
    };
    tape.add_row(out, b)
}

fn forward_tape(
    tape: &mut Tape,
    m: &TeacherModel,
    p: &Params,
    adj: &Rc<CsrMatrix>,
    x: Var,
    mut drop: Option<&mut rng::Rng>,
) -> Result<Var> {
    let h = layer(tape, m.kind, adj, x, p.w1, p.b1)?;
    let mut h = tape.relu(h)?;
    if let Some(r) = drop.as_deref_mut() {
        h = nn::dropout(tape, h, m.dropout, r)?;
    }
    layer(tape, m.kind, adj, h, p.w2, p.b2)
}

impl TeacherModel {
    pub fn init(kind: TeacherKind, in_dim: usize, hidden: usize, classes: usize, dropout: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "teacher.init", 0);
        let fan = |d: usize| if kind == TeacherKind::Sage { 2 * d } else { d };
        Self {
            kind,
            hidden,
            dropout,
            w1: nn::glorot(fan(in_dim), hidden, &mut r),
            b1: NdArray::zeros(&[1, hidden]),
            w2: nn::glorot(fan(hidden), classes, &mut r),
            b2: NdArray::zeros(&[1, classes]),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self.kind {
            TeacherKind::Gcn => self.w1.rows(),
            TeacherKind::Sage => self.w1.rows() / 2,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w2.cols()
    }

    fn push_params(&self, tape: &mut Tape, trainable: bool) -> Result<Params> {
        let mut leaf = |a: &NdArray| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        Ok(Params {
            w1: leaf(&self.w1)?,
            b1: leaf(&self.b1)?,
            w2: leaf(&self.w2)?,
            b2: leaf(&self.b2)?,
        })
    }

    fn params_mut(&mut self) -> [&mut NdArray; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Logits `N x C` without dropout.
pub fn teacher_forward(m: &TeacherModel, g: &SparseGraph, features: &NdArray) -> Result<NdArray> {
    let adj = propagation(m.kind, g);
    forward_with(m, &adj, features)
}

fn forward_with(m: &TeacherModel, adj: &Rc<CsrMatrix>, features: &NdArray) -> Result<NdArray> {
    if features.cols() != m.in_dim() || features.rows() != adj.n_rows() {
        return Err(Error::shape("teacher_forward", &[adj.n_rows(), m.in_dim()], features.shape()));
    }
    let mut tape = Tape::new();
    let p = m.push_params(&mut tape, false)?;
    let x = tape.constant(features.clone())?;
    let out = forward_tape(&mut tape, m, &p, adj, x, None)?;
    Ok(tape.value(out).clone())
}

/// Differentiable teacher loss for gradient checks: mean CE on `nodes`.
pub fn teacher_loss(
    tape: &mut Tape,
    m: &TeacherModel,
    adj: &Rc<CsrMatrix>,
    x: Var,
    weights: [Var; 4],
    nodes: &[usize],
    labels: &[usize],
) -> Result<Var> {
    let p = Params {
        w1: weights[0],
        b1: weights[1],
        w2: weights[2],
        b2: weights[3],
    };
    let logits = forward_tape(tape, m, &p, adj, x, None)?;
    nn::cross_entropy(tape, logits, nodes, labels)
}

/// Summary of a teacher training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTrace {
    pub best_epoch: usize,
    pub best_val: f64,
    pub train_loss: Vec<f64>,
}

/// Full-batch training with cross-entropy on the labeled set and early
/// stopping on validation accuracy. Returns the best-validation weights.
pub fn train_teacher(g: &SparseGraph, split: &SplitSpec, cfg: &TeacherConfig) -> Result<(TeacherModel, TeacherTrace)> {
    cfg.validate()?;
    if split.labeled.is_empty() || split.val.is_empty() {
        return Err(Error::invalid("teacher training needs nonempty labeled and val sets"));
    }
    let adj = propagation(cfg.kind, g);
    let mut model = TeacherModel::init(
        cfg.kind,
        g.num_features(),
        cfg.hidden,
        g.num_classes(),
        cfg.dropout,
        cfg.seed,
    );
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut best = (model.clone(), f64::NEG_INFINITY, 0);
    let mut since_best = 0;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, "teacher.dropout", epoch as u64);
        let mut tape = Tape::new();
        let p = model.push_params(&mut tape, true)?;
        let xin = nn::dropout_array(g.features(), cfg.dropout, &mut r);
        let x = tape.constant(xin)?;
        let logits = forward_tape(&mut tape, &model, &p, &adj, x, Some(&mut r))?;
        let loss = nn::cross_entropy(&mut tape, logits, &split.labeled, g.labels())?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("teacher loss {}", lv),
            });
        }
        trace.push(lv);
        let mut grads = tape.backward(loss)?;
        let gs = [p.w1, p.b1, p.w2, p.b2].map(|v| grads.take(v));
        opt.step(&mut model.params_mut(), &gs);

        let pred = forward_with(&model, &adj, g.features())?.argmax_rows();
        let val = nn::accuracy_of(&pred, g.labels(), &split.val);
        debug!("teacher epoch {} loss {:.4} val {:.4}", epoch, lv, val);
        if val > best.1 {
            best = (model.clone(), val, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    info!("teacher best val {:.4} at epoch {}", best.1, best.2);
    Ok((
        best.0,
        TeacherTrace {
            best_epoch: best.2,
            best_val: best.1,
            train_loss: trace,
        },
    ))
}

/// Teacher class distributions; rows sum to one.
pub fn soft_labels(m: &TeacherModel, g: &SparseGraph, features: &NdArray) -> Result<NdArray> {
    Ok(teacher_forward(m, g, features)?.softmax_rows())
}

/// Soft labels on `features + N(0, delta^2)`, one noise draw per call.
pub fn perturbed_soft_labels(
    m: &TeacherModel,
    g: &SparseGraph,
    features: &NdArray,
    delta: f64,
    seed: u64,
) -> Result<NdArray> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("perturbation scale {} must be positive", delta)));
    }
    let mut r = rng::stream(seed, "teacher.perturb", 0);
    let noisy = nn::gaussian_noise(features, delta, &mut r)?;
    soft_labels(m, g, &noisy)
}

/// On-disk teacher: weights plus the configuration and split that produced
/// them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherCheckpoint {
    pub version: String,
    pub model: TeacherModel,
    pub config: TeacherConfig,
    pub split: SplitSpec,
    pub labeled_per_class: usize,
    pub val_size: usize,
}

impl TeacherCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let ck: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected version {:?}, found {:?}",
                CHECKPOINT_VERSION, ck.version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SparseGraph {
        let x = NdArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        SparseGraph::from_edges(3, &[(0, 1), (1, 2)], x, vec![0, 1, 1], 2).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let g = tiny();
        for kind in [TeacherKind::Gcn, TeacherKind::Sage] {
            let mut m = TeacherModel::init(kind, 2, 4, 2, 0.0, 1);
            for p in m.params_mut() {
                *p = NdArray::zeros(p.shape());
            }
            let out = teacher_forward(&m, &g, g.features()).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0));
            let soft = soft_labels(&m, &g, g.features()).unwrap();
            assert!(soft.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn single_node_gcn_identity() {
        let x = NdArray::from_rows(&[vec![2.0, -3.0]]).unwrap();
        let g = SparseGraph::from_edges(1, &[], x, vec![0], 2).unwrap();
        let eye = NdArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = TeacherModel {
            kind: TeacherKind::Gcn,
            hidden: 2,
            dropout: 0.0,
            w1: eye.clone(),
            b1: NdArray::zeros(&[1, 2]),
            w2: eye,
            b2: NdArray::zeros(&[1, 2]),
        };
        let out = teacher_forward(&m, &g, g.features()).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0]);
    }

    #[test]
    fn width_mismatch_is_error() {
        let g = tiny();
        let m = TeacherModel::init(TeacherKind::Gcn, 3, 4, 2, 0.0, 1);
        assert!(teacher_forward(&m, &g, g.features()).is_err());
    }

    #[test]
    fn perturbation_requires_positive_delta() {
        let g = tiny();
        let m = TeacherModel::init(TeacherKind::Gcn, 2, 4, 2, 0.0, 1);
        assert!(perturbed_soft_labels(&m, &g, g.features(), 0.0, 1).is_err());
        let a = perturbed_soft_labels(&m, &g, g.features(), 0.1, 7).unwrap();
        let b = perturbed_soft_labels(&m, &g, g.features(), 0.1, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_lists_every_problem() {
        let cfg = TeacherConfig {
            hidden: 0,
            lr: -1.0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{:?}", other),
        }
    }
}
