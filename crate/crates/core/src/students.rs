//! Graph-free students: MLP, soft-voting ensemble, vanilla MoE and
//! Routing-by-Memory, plus routing, the memory update and the embedding
//! losses.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::rng::{self, Rng};
use crate::tensor::{softmax_in_place, NdArray};

pub const CHECKPOINT_VERSION: &str = "student-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentKind {
    Mlp,
    Ensemble,
    Moe,
    Rbm,
}

impl StudentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Ensemble => "ensemble",
            Self::Moe => "moe",
            Self::Rbm => "rbm",
        }
    }

    pub fn has_router(self) -> bool {
        matches!(self, Self::Moe | Self::Rbm)
    }
}

impl std::str::FromStr for StudentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "ensemble" => Ok(Self::Ensemble),
            "moe" => Ok(Self::Moe),
            "rbm" => Ok(Self::Rbm),
            other => Err(Error::invalid(format!(
                "unknown student kind {:?} (expected mlp|ensemble|moe|rbm)",
                other
            ))),
        }
    }
}

/// Affine map `h W + b`, `W` is `d' x d''`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: NdArray,
    pub b: NdArray,
}

impl Linear {
    pub fn init(d_in: usize, d_out: usize, r: &mut Rng) -> Self {
        Self {
            w: nn::glorot(d_in, d_out, r),
            b: NdArray::zeros(&[1, d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }
}

/// Routing-by-Memory layer. `q` holds one memory embedding per expert in the
/// layer's input space; `att` holds per-expert input log-scales and `s` the
/// output log-scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbmLayer {
    pub experts: Vec<Linear>,
    pub q: NdArray,
    pub att: NdArray,
    pub s: NdArray,
    pub k: usize,
}

/// Vanilla cosine-routed MoE layer. Routing scores compare `h proj`
/// against `q`; everything is learned by backpropagation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub experts: Vec<Linear>,
    pub q: NdArray,
    pub proj: NdArray,
    pub att: NdArray,
    pub s: NdArray,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    Dense(Linear),
    Rbm(RbmLayer),
    Moe(MoeLayer),
}

impl Layer {
    pub fn d_in(&self) -> usize {
        match self {
            Layer::Dense(l) => l.d_in(),
            Layer::Rbm(l) => l.experts[0].d_in(),
            Layer::Moe(l) => l.experts[0].d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Layer::Dense(l) => l.d_out(),
            Layer::Rbm(l) => l.experts[0].d_out(),
            Layer::Moe(l) => l.experts[0].d_out(),
        }
    }

    pub fn num_experts(&self) -> usize {
        match self {
            Layer::Dense(_) => 1,
            Layer::Rbm(l) => l.experts.len(),
            Layer::Moe(l) => l.experts.len(),
        }
    }

    pub fn experts_mut(&mut self) -> &mut [Linear] {
        match self {
            Layer::Dense(l) => std::slice::from_mut(l),
            Layer::Rbm(l) => &mut l.experts,
            Layer::Moe(l) => &mut l.experts,
        }
    }

    /// Parameters in binding order.
    fn params(&self) -> Vec<&NdArray> {
        let mut out = Vec::new();
        match self {
            Layer::Dense(l) => out.extend([&l.w, &l.b]),
            Layer::Rbm(l) => {
                out.extend([&l.q, &l.att, &l.s]);
                l.experts.iter().for_each(|e| out.extend([&e.w, &e.b]));
            }
            Layer::Moe(l) => {
                out.extend([&l.q, &l.proj, &l.att, &l.s]);
                l.experts.iter().for_each(|e| out.extend([&e.w, &e.b]));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut NdArray> {
        let mut out = Vec::new();
        match self {
            Layer::Dense(l) => out.extend([&mut l.w, &mut l.b]),
            Layer::Rbm(l) => {
                out.extend([&mut l.q, &mut l.att, &mut l.s]);
                l.experts.iter_mut().for_each(|e| out.extend([&mut e.w, &mut e.b]));
            }
            Layer::Moe(l) => {
                out.extend([&mut l.q, &mut l.proj, &mut l.att, &mut l.s]);
                l.experts.iter_mut().for_each(|e| out.extend([&mut e.w, &mut e.b]));
            }
        }
        out
    }

    /// Memory embeddings are excluded from weight decay.
    fn decay_exempt(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params().len()];
        if !matches!(self, Layer::Dense(_)) {
            mask[0] = true;
        }
        mask
    }
}

/// Per-sample expert weights with exactly `k` strictly positive entries per
/// row summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingResult {
    pub weights: NdArray,
    pub active: Vec<Vec<usize>>,
    /// Rows whose routing input had zero norm; they are routed by the
    /// epsilon-stabilized cosine.
    pub zero_norm_rows: usize,
}

impl RoutingResult {
    pub fn mask(&self) -> Vec<bool> {
        self.weights.data().iter().map(|&w| w > 0.0).collect()
    }

    /// Column sums of the weights.
    pub fn load(&self) -> Vec<f64> {
        let e = self.weights.cols();
        let mut load = vec![0.0; e];
        for r in 0..self.weights.rows() {
            for (l, w) in load.iter_mut().zip(self.weights.row(r)) {
                *l += w;
            }
        }
        load
    }

    /// Expert with the largest weight per row, lowest index on ties.
    pub fn top_expert(&self) -> Vec<usize> {
        self.weights.argmax_rows()
    }

    /// Number of samples routed to each expert (with nonzero weight).
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.weights.cols()];
        for a in &self.active {
            a.iter().for_each(|&i| counts[i] += 1);
        }
        counts
    }
}

/// Indices of the `k` largest entries of `row`, lower index first on ties,
/// returned in ascending index order.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Top-k selection and softmax over the selected scores only.
pub fn gate_from_scores(scores: &NdArray, k: usize) -> Result<RoutingResult> {
    let e = scores.cols();
    if k == 0 || k > e {
        return Err(Error::invalid(format!("need 1 <= k <= E, got k={} E={}", k, e)));
    }
    let mut weights = NdArray::zeros(scores.shape());
    let mut active = Vec::with_capacity(scores.rows());
    let mut buf = Vec::with_capacity(k);
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let sel = top_k(row, k);
        buf.clear();
        buf.extend(sel.iter().map(|&i| row[i]));
        softmax_in_place(&mut buf);
        let out = weights.row_mut(r);
        for (&i, &w) in sel.iter().zip(&buf) {
            out[i] = w;
        }
        active.push(sel);
    }
    Ok(RoutingResult {
        weights,
        active,
        zero_norm_rows: 0,
    })
}

fn zero_rows(h: &NdArray) -> usize {
    (0..h.rows()).filter(|&r| h.row(r).iter().all(|&v| v == 0.0)).count()
}

/// RbM routing: cosine of `h` against the memory, top-k, masked softmax.
pub fn route_rbm(layer: &RbmLayer, h: &NdArray) -> Result<RoutingResult> {
    let scores = cosine_matrix(h, &layer.q)?;
    let mut r = gate_from_scores(&scores, layer.k)?;
    r.zero_norm_rows = zero_rows(h);
    Ok(r)
}

/// Routing input of a vanilla MoE layer, `h proj`.
pub fn moe_router_input(layer: &MoeLayer, h: &NdArray) -> Result<NdArray> {
    h.matmul(&layer.proj)
}

pub fn route_moe(layer: &MoeLayer, h: &NdArray) -> Result<RoutingResult> {
    let wh = moe_router_input(layer, h)?;
    let scores = cosine_matrix(&wh, &layer.q)?;
    let mut r = gate_from_scores(&scores, layer.k)?;
    r.zero_norm_rows = zero_rows(&wh);
    Ok(r)
}

/// Differentiable gate for a given routing mask: masked softmax of the
/// cosine scores `cos(a, b)`.
pub fn gate_tape(tape: &mut Tape, a: Var, b: Var, k: usize) -> Result<(Var, RoutingResult)> {
    let scores = tape.cosine(a, b)?;
    let mut routing = gate_from_scores(tape.value(scores), k)?;
    routing.zero_norm_rows = zero_rows(tape.value(a));
    let gate = tape.masked_softmax(scores, routing.mask())?;
    Ok((gate, routing))
}

/// `exp(s) * sum_i gate[:, i] * (h_drop diag(exp(att_i)) W_i + b_i)`.
/// Experts are evaluated densely and weighted by their gate column, which
/// is zero for unrouted samples.
fn mixture_tape(
    tape: &mut Tape,
    h_drop: Var,
    gate: Var,
    att: Var,
    s: Var,
    experts: &[(Var, Var)],
) -> Result<Var> {
    let att_t = tape.transpose(att)?;
    let scale = tape.exp(att_t)?;
    let mut acc: Option<Var> = None;
    for (i, &(w, b)) in experts.iter().enumerate() {
        let a_i = tape.column(scale, i)?;
        let w_scaled = tape.mul_col(w, a_i)?;
        let out = tape.matmul(h_drop, w_scaled)?;
        let out = tape.add_row(out, b)?;
        let g_i = tape.column(gate, i)?;
        let weighted = tape.mul_col(out, g_i)?;
        acc = Some(match acc {
            None => weighted,
            Some(prev) => tape.add(prev, weighted)?,
        });
    }
    let es = tape.exp(s)?;
    tape.mul_scalar(acc.expect("at least one expert"), es)
}

/// Router state of one MoE or RbM layer after a forward pass.
#[derive(Clone, Debug)]
pub struct LayerRouting {
    /// Layer input `h` (routing input for RbM).
    pub input: Var,
    /// Vector compared against the embeddings (`h` for RbM, `h proj` for MoE).
    pub router_input: Var,
    pub gate: Var,
    /// Embedding table as bound on the tape.
    pub q: Var,
    pub routing: RoutingResult,
    pub is_rbm: bool,
}

/// Forward-pass switches.
pub struct ForwardMode<'a> {
    pub training: bool,
    /// Rate between layers.
    pub dropout: f64,
    /// Rate on the first layer's input.
    pub input_dropout: f64,
    pub rng: Option<&'a mut Rng>,
    /// Sends every sample to this expert with weight one.
    pub forced_expert: Option<usize>,
}

impl ForwardMode<'_> {
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            input_dropout: 0.0,
            rng: None,
            forced_expert: None,
        }
    }
}

pub struct ForwardOut {
    pub logits: Var,
    pub routing: Vec<LayerRouting>,
}

fn forced_gate(tape: &mut Tape, rows: usize, e: usize, expert: usize) -> Result<(Var, RoutingResult)> {
    let mut w = NdArray::zeros(&[rows, e]);
    for r in 0..rows {
        w.set(r, expert, 1.0);
    }
    let gate = tape.constant(w.clone())?;
    Ok((
        gate,
        RoutingResult {
            weights: w,
            active: vec![vec![expert]; rows],
            zero_norm_rows: 0,
        },
    ))
}

/// One stack of layers with ReLU in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn params(&self) -> Vec<&NdArray> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut NdArray> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn decay_exempt(&self) -> Vec<bool> {
        self.layers.iter().flat_map(Layer::decay_exempt).collect()
    }

    /// Binds every parameter as a tape leaf, in [`params`](Self::params)
    /// order.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params().into_iter().map(|p| tape.param(p.clone())).collect()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: &mut ForwardMode) -> Result<ForwardOut> {
        let mut h = x;
        let mut routing = Vec::new();
        let mut offset = 0;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let n = layer.params().len();
            let v = &vars[offset..offset + n];
            offset += n;
            if tape.value(h).cols() != layer.d_in() {
                return Err(Error::shape("student_forward", &[layer.d_in()], tape.value(h).shape()));
            }
            let rate = if li == 0 { mode.input_dropout } else { mode.dropout };
            let h_drop = match (&mut mode.rng, mode.training && rate > 0.0) {
                (Some(r), true) => nn::dropout(tape, h, rate, r)?,
                _ => h,
            };
            let out = match layer {
                Layer::Dense(_) => {
                    let o = tape.matmul(h_drop, v[0])?;
                    tape.add_row(o, v[1])?
                }
                Layer::Rbm(l) => {
                    let e = l.experts.len();
                    let (gate, r) = match mode.forced_expert {
                        Some(i) => forced_gate(tape, tape.value(h).rows(), e, i)?,
                        None => {
                            let q_sg = tape.stop_gradient(v[0])?;
                            gate_tape(tape, h, q_sg, l.k)?
                        }
                    };
                    let experts: Vec<(Var, Var)> = (0..e).map(|i| (v[3 + 2 * i], v[4 + 2 * i])).collect();
                    let out = mixture_tape(tape, h_drop, gate, v[1], v[2], &experts)?;
                    routing.push(LayerRouting {
                        input: h,
                        router_input: h,
                        gate,
                        q: v[0],
                        routing: r,
                        is_rbm: true,
                    });
                    out
                }
                Layer::Moe(l) => {
                    let e = l.experts.len();
                    let wh = tape.matmul(h, v[1])?;
                    let (gate, r) = match mode.forced_expert {
                        Some(i) => forced_gate(tape, tape.value(h).rows(), e, i)?,
                        None => gate_tape(tape, wh, v[0], l.k)?,
                    };
                    let experts: Vec<(Var, Var)> = (0..e).map(|i| (v[4 + 2 * i], v[5 + 2 * i])).collect();
                    let out = mixture_tape(tape, h_drop, gate, v[2], v[3], &experts)?;
                    routing.push(LayerRouting {
                        input: h,
                        router_input: wh,
                        gate,
                        q: v[0],
                        routing: r,
                        is_rbm: false,
                    });
                    out
                }
            };
            h = if li < last { tape.relu(out)? } else { out };
        }
        Ok(ForwardOut { logits: h, routing })
    }

    /// Evaluation-mode logits and per-layer routing, plus each layer's input.
    pub fn predict(&self, x: &NdArray) -> Result<(NdArray, Vec<RoutingResult>, Vec<NdArray>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<_>>()?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward(&mut tape, &vars, xv, &mut ForwardMode::eval())?;
        let inputs = out.routing.iter().map(|l| tape.value(l.router_input).clone()).collect();
        let routes = out.routing.into_iter().map(|l| l.routing).collect();
        Ok((tape.value(out.logits).clone(), routes, inputs))
    }
}

/// Architecture of a student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentArch {
    pub hidden: usize,
    pub layers: usize,
    pub experts: usize,
    pub active: usize,
    /// Routing-space width of a vanilla MoE layer.
    pub embed_dim: usize,
    pub members: usize,
}

impl Default for StudentArch {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            experts: 8,
            active: 3,
            embed_dim: 64,
            members: 3,
        }
    }
}

impl StudentArch {
    pub fn validate(&self, kind: StudentKind) -> Vec<String> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("layers must be >= 1".to_string());
        }
        if self.hidden == 0 {
            errs.push("hidden must be >= 1".to_string());
        }
        if kind.has_router() {
            if self.experts == 0 {
                errs.push("experts must be >= 1".to_string());
            }
            if self.active == 0 || self.active > self.experts {
                errs.push(format!(
                    "active experts k={} must satisfy 1 <= k <= E={}",
                    self.active, self.experts
                ));
            }
            if kind == StudentKind::Moe && self.embed_dim == 0 {
                errs.push("embed_dim must be >= 1".to_string());
            }
        }
        if kind == StudentKind::Ensemble && self.members == 0 {
            errs.push("ensemble members must be >= 1".to_string());
        }
        errs
    }
}

fn unit_rows(rows: usize, cols: usize, r: &mut Rng) -> NdArray {
    let mut q = nn::glorot(rows, cols, r);
    for i in 0..rows {
        let row = q.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    q
}

/// Fresh network for `kind` (ensembles use one network per member).
pub fn init_network(kind: StudentKind, arch: &StudentArch, d_in: usize, classes: usize, seed: u64) -> Network {
    let mut r = rng::stream(seed, "student.init", 0);
    let dims: Vec<usize> = std::iter::once(d_in)
        .chain(std::iter::repeat_n(arch.hidden, arch.layers - 1))
        .chain(std::iter::once(classes))
        .collect();
    let layers = dims
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            match kind {
                StudentKind::Mlp | StudentKind::Ensemble => Layer::Dense(Linear::init(a, b, &mut r)),
                StudentKind::Rbm => Layer::Rbm(RbmLayer {
                    experts: (0..arch.experts).map(|_| Linear::init(a, b, &mut r)).collect(),
                    q: unit_rows(arch.experts, a, &mut r),
                    att: NdArray::zeros(&[arch.experts, a]),
                    s: NdArray::scalar(0.0),
                    k: arch.active,
                }),
                StudentKind::Moe => Layer::Moe(MoeLayer {
                    experts: (0..arch.experts).map(|_| Linear::init(a, b, &mut r)).collect(),
                    q: unit_rows(arch.experts, arch.embed_dim, &mut r),
                    proj: nn::glorot(a, arch.embed_dim, &mut r),
                    att: NdArray::zeros(&[arch.experts, a]),
                    s: NdArray::scalar(0.0),
                    k: arch.active,
                }),
            }
        })
        .collect();
    Network { layers }
}

/// A trained or initialized student. MLP, MoE and RbM have one member;
/// an ensemble averages the class probabilities of its members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub kind: StudentKind,
    pub members: Vec<Network>,
}

impl StudentModel {
    pub fn num_layers(&self) -> usize {
        self.members[0].layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.members.iter().flat_map(|m| m.params()).map(NdArray::len).sum()
    }
}

/// Logits of a student in evaluation mode together with per-layer routing
/// (empty for MLP and ensemble). Ensemble logits are the log of the mean
/// member probabilities, so their softmax is the soft vote.
pub fn student_forward(model: &StudentModel, x: &NdArray) -> Result<(NdArray, Vec<RoutingResult>)> {
    if model.members.len() == 1 {
        let (logits, routes, _) = model.members[0].predict(x)?;
        return Ok((logits, routes));
    }
    let mut mean: Option<NdArray> = None;
    for m in &model.members {
        let p = m.predict(x)?.0.softmax_rows();
        match mean.as_mut() {
            None => mean = Some(p),
            Some(acc) => acc.add_assign(&p),
        }
    }
    let k = model.members.len() as f64;
    let probs = mean.expect("nonempty ensemble").scale(1.0 / k);
    Ok((probs.map(|p| p.max(f64::MIN_POSITIVE).ln()), Vec::new()))
}

/// Memory update for one RbM layer. For each expert, the routed samples are
/// averaged with softmax-over-batch weights of their gate values and mixed
/// into the embedding with factor `1 - lambda_hat`. Experts without routed
/// samples keep their embedding.
pub fn ema_update(q: &mut NdArray, h: &NdArray, routing: &RoutingResult, lambda_hat: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_hat) {
        return Err(Error::invalid(format!("lambda_hat {} outside [0, 1]", lambda_hat)));
    }
    if h.rows() != routing.weights.rows() || h.cols() != q.cols() || routing.weights.cols() != q.rows() {
        return Err(Error::shape("ema_update", q.shape(), h.shape()));
    }
    if lambda_hat == 1.0 {
        return Ok(());
    }
    let d = q.cols();
    for i in 0..q.rows() {
        let routed: Vec<usize> = (0..h.rows()).filter(|&j| routing.weights.get(j, i) > 0.0).collect();
        if routed.is_empty() {
            continue;
        }
        let mut w: Vec<f64> = routed.iter().map(|&j| routing.weights.get(j, i)).collect();
        softmax_in_place(&mut w);
        let mut target = vec![0.0; d];
        for (&j, &wj) in routed.iter().zip(&w) {
            for (t, &x) in target.iter_mut().zip(h.row(j)) {
                *t += wj * x;
            }
        }
        for (qv, t) in q.row_mut(i).iter_mut().zip(target) {
            *qv = lambda_hat * *qv + (1.0 - lambda_hat) * t;
        }
    }
    Ok(())
}

/// Commitment loss `-(1/B) sum_b sum_i gate[b,i] cos(sg(q_i), h_b)`.
/// `q` is stopped here, so gradient reaches `h` (and the gate) only.
pub fn loss_vq(tape: &mut Tape, q: Var, h: Var, gate: Var) -> Result<Var> {
    let q_sg = tape.stop_gradient(q)?;
    let cos = tape.cosine(h, q_sg)?;
    let weighted = tape.mul(cos, gate)?;
    let total = tape.sum(weighted)?;
    let b = tape.value(h).rows() as f64;
    tape.scale(total, -1.0 / b)
}

/// Self-similarity loss `(1/E^2) sum_ij cos(sg(q_j), q_i)`.
pub fn loss_ss(tape: &mut Tape, q: Var) -> Result<Var> {
    let q_sg = tape.stop_gradient(q)?;
    let cos = tape.cosine(q, q_sg)?;
    tape.mean(cos)
}

/// Load-balance loss `Var(load) / Mean(load)^2` with `load = sum_b gate[b,:]`
/// and population variance.
pub fn loss_lb(tape: &mut Tape, gate: Var) -> Result<Var> {
    let load = tape.sum_rows(gate)?;
    let total = tape.value(load).sum();
    assert!(total > 0.0, "expert load is identically zero");
    let var = tape.variance(load)?;
    let mean = tape.mean(load)?;
    let mean_sq = tape.square(mean)?;
    tape.div(var, mean_sq)
}

/// Value-level helpers for the losses, mainly for tests and diagnostics.
pub mod eval {
    use super::*;

    fn run(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        Ok(tape.value(v).item())
    }

    pub fn loss_vq(q: &NdArray, h: &NdArray, weights: &NdArray) -> Result<f64> {
        run(|t| {
            let (q, h, g) = (t.constant(q.clone())?, t.constant(h.clone())?, t.constant(weights.clone())?);
            super::loss_vq(t, q, h, g)
        })
    }

    pub fn loss_ss(q: &NdArray) -> Result<f64> {
        run(|t| {
            let q = t.constant(q.clone())?;
            super::loss_ss(t, q)
        })
    }

    pub fn loss_lb(weights: &NdArray) -> Result<f64> {
        run(|t| {
            let g = t.constant(weights.clone())?;
            super::loss_lb(t, g)
        })
    }
}

/// Value-level RbM block: `exp(s) sum_i G_i f_i(exp(att_i) * h_drop)`.
/// Routing uses the undropped `h`; dropout hits the expert input only.
pub fn rbm_block_forward(
    layer: &RbmLayer,
    h: &NdArray,
    dropout_rate: f64,
    training: bool,
    rng: Option<&mut Rng>,
) -> Result<NdArray> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone())?;
    let q = tape.constant(layer.q.clone())?;
    let (gate, _) = gate_tape(&mut tape, hv, q, layer.k)?;
    let h_drop = match (rng, training && dropout_rate > 0.0) {
        (Some(r), true) => nn::dropout(&mut tape, hv, dropout_rate, r)?,
        _ => hv,
    };
    let att = tape.constant(layer.att.clone())?;
    let s = tape.constant(layer.s.clone())?;
    let experts = layer
        .experts
        .iter()
        .map(|e| Ok((tape.constant(e.w.clone())?, tape.constant(e.b.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let out = mixture_tape(&mut tape, h_drop, gate, att, s, &experts)?;
    Ok(tape.value(out).clone())
}

/// Serialized student with the metadata needed to rebuild inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentCheckpoint {
    pub version: String,
    pub kind: StudentKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub experts: usize,
    pub active: usize,
    pub model: StudentModel,
    pub seed: u64,
}

impl StudentCheckpoint {
    pub fn new(model: StudentModel, seed: u64) -> Self {
        let first = &model.members[0].layers;
        let (experts, active) = match &first[0] {
            Layer::Rbm(l) => (l.experts.len(), l.k),
            Layer::Moe(l) => (l.experts.len(), l.k),
            Layer::Dense(_) => (0, 0),
        };
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            kind: model.kind,
            input_dim: first[0].d_in(),
            num_classes: first[first.len() - 1].d_out(),
            experts,
            active,
            model,
            seed,
        }
    }

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
