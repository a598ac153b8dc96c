//! Acceptance suite. Prints one PASS/FAIL line per criterion. A failing
//! criterion is reported, not hidden; set `ACCEPTANCE_STRICT=1` to turn any
//! FAIL into a nonzero exit status.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng as _;
use rbm_core::autodiff::COSINE_EPS;
use rbm_core::distill::{self, anneal_lambda, total_loss, AnnealConfig, DistillData, LayerTerms};
use rbm_core::gradcheck::{analytic_gradient, max_relative_error, numeric_gradient};
use rbm_core::harness::{
    self, append_results, mean_std, prepare, split_for, train_and_evaluate, training_view, Prepared, RunResult,
    TrackedSource,
};
use rbm_core::poswalk::{self, WalkConfig};
use rbm_core::rng::{self, Rng};
use rbm_core::split::{cut_inductive_edges, inductive_count};
use rbm_core::students::{
    self, ema_update, gate_tape, init_network, route_moe, route_rbm, ForwardMode, Linear, MoeLayer, Network, RbmLayer,
    RoutingResult, StudentCheckpoint,
};
use rbm_core::synth::{self, sbm, SbmSpec};
use rbm_core::{
    load_bundle, DistillConfig, NdArray, Result, RunConfig, SparseGraph, SplitMode, StudentArch, StudentKind, StudentModel, Tape,
    Var,
};

const STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const INSTANCES: usize = 20;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(id: usize, name: &'static str, pass: bool, detail: String) -> Self {
        Self { id, name, pass, detail }
    }

    fn failed(id: usize, name: &'static str, err: impl std::fmt::Display) -> Self {
        Self::new(id, name, false, format!("error: {}", err))
    }
}

fn uniform(r: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> NdArray {
    NdArray::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn distribution_rows(r: &mut Rng, rows: usize, cols: usize) -> NdArray {
    uniform(r, rows, cols, -2.0, 2.0).softmax_rows()
}

/// Scalarizes `out` with fixed random weights.
fn weigh(t: &mut Tape, out: Var, w: &NdArray) -> Result<Var> {
    let c = t.constant(w.clone())?;
    let p = t.mul(out, c)?;
    t.sum(p)
}

fn bits(a: &NdArray) -> Vec<u64> {
    a.data().iter().map(|v| v.to_bits()).collect()
}

/// Relative error (coordinates within the checker's noise floor count as
/// exact) and the largest absolute gap between analytic and central
/// difference gradients.
type Check = (f64, f64);

fn compare(analytic: &NdArray, numeric: &NdArray) -> Check {
    let abs = analytic.data().iter().zip(numeric.data()).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    (max_relative_error(analytic, numeric), abs)
}

fn check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &NdArray) -> Result<Check> {
    Ok(compare(&analytic_gradient(&f, x)?, &numeric_gradient(&f, x, STEP)?))
}

/// Running maxima of gradient-check errors per family.
#[derive(Default)]
struct GradLog {
    rows: Vec<(&'static str, usize, f64, f64)>,
}

impl GradLog {
    fn record(&mut self, family: &'static str, (rel, abs): Check) {
        match self.rows.iter_mut().find(|r| r.0 == family) {
            Some(row) => {
                row.1 += 1;
                row.2 = row.2.max(rel);
                row.3 = row.3.max(abs);
            }
            None => self.rows.push((family, 1, rel, abs)),
        }
    }
}

/// Every parameter of `net` except memory tables bound as constants, with
/// `probe` (if any) replaced by the free variable `v`.
fn bind_with_probe(net: &Network, t: &mut Tape, probe: Option<usize>, v: Var) -> Result<Vec<Var>> {
    net.params()
        .into_iter()
        .enumerate()
        .map(|(i, p)| if Some(i) == probe { Ok(v) } else { t.constant(p.clone()) })
        .collect()
}

fn tiny_arch(experts: usize, active: usize, layers: usize) -> StudentArch {
    StudentArch {
        hidden: 4,
        layers,
        experts,
        active,
        embed_dim: 3,
        members: 1,
    }
}

fn gradient_suite() -> Result<(GradLog, f64)> {
    let start = Instant::now();
    let mut log = GradLog::default();
    for i in 0..INSTANCES as u64 {
        let mut r = rng::stream(i, "acceptance.grad", 0);
        let (n, d, e, c) = (r.random_range(3..7), r.random_range(2..6), r.random_range(2..5), r.random_range(2..5));
        let k = r.random_range(1..=e);
        let h = uniform(&mut r, n, d, -1.5, 1.5);
        let q = uniform(&mut r, e, d, -1.5, 1.5);

        // Commitment loss, with the gate computed from h so the gradient
        // reaches h through both the cosine term and the gate.
        let qc = q.clone();
        let err = check(
            move |t, hv| {
                let qv = t.constant(qc.clone())?;
                let (gate, _) = gate_tape(t, hv, qv, k)?;
                students::loss_vq(t, qv, hv, gate)
            },
            &h,
        )?;
        log.record("commitment (VQ)", err);

        // The stopped copy is a constant for the gradient, so the numeric
        // oracle differentiates with that copy frozen at the current value.
        let analytic = analytic_gradient(&|t: &mut Tape, qv: Var| students::loss_ss(t, qv), &q)?;
        let q0 = q.clone();
        let frozen = move |t: &mut Tape, qv: Var| {
            let fixed = t.constant(q0.clone())?;
            let cos = t.cosine(qv, fixed)?;
            t.mean(cos)
        };
        let numeric = numeric_gradient(&frozen, &q, STEP)?;
        log.record("self-similarity (SS)", compare(&analytic, &numeric));

        let qc = q.clone();
        let err = check(
            move |t, hv| {
                let qv = t.constant(qc.clone())?;
                let (gate, _) = gate_tape(t, hv, qv, k)?;
                students::loss_lb(t, gate)
            },
            &h,
        )?;
        log.record("load balance (LB)", err);

        let logits = uniform(&mut r, n, c, -2.0, 2.0);
        let soft = distribution_rows(&mut r, n, c);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let nu = r.random_range(0.05..0.95);
        let labeled: Vec<usize> = (0..n).filter(|v| v % 2 == 0).collect();
        let all: Vec<usize> = (0..n).collect();
        let (s2, l2) = (soft.clone(), labels.clone());
        let err = check(
            move |t, z| distill::loss_kd(t, z, &l2, &s2, &labeled, &all, nu),
            &logits,
        )?;
        log.record("distillation (KD)", err);

        let samples = 3;
        let drawn: Vec<Option<usize>> = (0..n * samples)
            .map(|j| if j / samples == 1 { None } else { Some(r.random_range(0..n)) })
            .collect();
        let s2 = soft.clone();
        let err = check(move |t, z| distill::loss_krd(t, z, &s2, &drawn, samples, nu), &logits)?;
        log.record("reliable neighbors (KRD)", err);

        // Routers: gradient through a full routed layer, w.r.t. the layer
        // input and every learned parameter. RbM memories are excluded since
        // the router reads them through a stop-gradient.
        for kind in [StudentKind::Rbm, StudentKind::Moe] {
            let net = init_network(kind, &tiny_arch(e, k, 1), d, c, 100 + i);
            let w = uniform(&mut r, n, c, -1.0, 1.0);
            let family = if kind == StudentKind::Rbm { "RbM router path" } else { "MoE router path" };
            let (n2, h2, w2) = (net.clone(), h.clone(), w.clone());
            let err = check(
                move |t, xv| {
                    let vars = bind_with_probe(&n2, t, None, xv)?;
                    let out = n2.forward(t, &vars, xv, &mut ForwardMode::eval())?;
                    weigh(t, out.logits, &w2)
                },
                &h2,
            )?;
            log.record(family, err);
            let memory = net.decay_exempt();
            for (pi, p) in net.params().into_iter().enumerate() {
                if kind == StudentKind::Rbm && memory[pi] {
                    continue;
                }
                let (n2, h2, w2) = (net.clone(), h.clone(), w.clone());
                let err = check(
                    move |t, v| {
                        let vars = bind_with_probe(&n2, t, Some(pi), v)?;
                        let x = t.constant(h2.clone())?;
                        let out = n2.forward(t, &vars, x, &mut ForwardMode::eval())?;
                        weigh(t, out.logits, &w2)
                    },
                    p,
                )?;
                log.record(family, err);
            }
        }

        // Total objective of a two-layer RbM student, probed one learned
        // parameter at a time.
        let net = init_network(StudentKind::Rbm, &tiny_arch(e, k, 2), d, c, 200 + i);
        let g = SparseGraph::from_edges(n, &[(0, 1), (1, 2), (0, n - 1)], h.clone(), labels.clone(), c)?;
        let krd_draws: Vec<Option<usize>> = (0..n)
            .flat_map(|v| {
                let nb = g.neighbors(v).unwrap().to_vec();
                (0..2).map(move |s| nb.get(s % nb.len().max(1)).copied())
            })
            .collect();
        let cfg = DistillConfig {
            nu,
            alpha_vq: r.random_range(0.01..1.0),
            beta_ss: r.random_range(0.01..1.0),
            gamma_lb: r.random_range(0.01..1.0),
            ..DistillConfig::default()
        };
        let memory = net.decay_exempt();
        for (pi, p) in net.params().into_iter().enumerate().filter(|&(pi, _)| !memory[pi]) {
            let (n2, x2, g2, s2, d2, c2) = (net.clone(), h.clone(), g.clone(), soft.clone(), krd_draws.clone(), cfg.clone());
            let err = check(
                move |t, v| {
                    let vars = bind_with_probe(&n2, t, Some(pi), v)?;
                    let x = t.constant(x2.clone())?;
                    let out = n2.forward(t, &vars, x, &mut ForwardMode::eval())?;
                    let all: Vec<usize> = (0..g2.num_nodes()).collect();
                    let kd = distill::loss_kd(t, out.logits, g2.labels(), &s2, &[0, 1], &all, c2.nu)?;
                    let krd = distill::loss_krd(t, out.logits, &s2, &d2, 2, c2.nu)?;
                    let mut terms = Vec::new();
                    for l in &out.routing {
                        terms.push(LayerTerms {
                            vq: Some(students::loss_vq(t, l.q, l.input, l.gate)?),
                            ss: Some(students::loss_ss(t, l.q)?),
                            lb: Some(students::loss_lb(t, l.gate)?),
                        });
                    }
                    total_loss(t, kd, krd, &terms, &c2)
                },
                p,
            )?;
            log.record("total objective", err);
        }
    }
    Ok((log, start.elapsed().as_secs_f64()))
}

fn criterion_gradients() -> Outcome {
    let name = "gradient suite";
    match gradient_suite() {
        Ok((log, secs)) => {
            let worst = log.rows.iter().map(|r| r.2).fold(0.0, f64::max);
            let enough = log.rows.len() == 8 && log.rows.iter().all(|r| r.1 >= INSTANCES);
            let worst_abs = log.rows.iter().map(|r| r.3).fold(0.0, f64::max);
            let per: Vec<String> = log.rows.iter().map(|(f, n, _, a)| format!("{} n={} abs {:.0e}", f, n, a)).collect();
            Outcome::new(
                1,
                name,
                worst < GRAD_TOL && enough && secs < 60.0,
                format!(
                    "max rel err {:.2e} < {:.0e} (max abs gap {:.1e}), {:.1} s < 60 s; {}",
                    worst,
                    GRAD_TOL,
                    worst_abs,
                    secs,
                    per.join(", ")
                ),
            )
        }
        Err(e) => Outcome::failed(1, name, e),
    }
}

/// Routing oracle: enumerate every k-subset, score it by the sum of its
/// cosines, keep the best (lexicographically smallest on exact ties), and
/// softmax the selected cosines.
fn oracle_weights(x: &NdArray, q: &NdArray, k: usize) -> Vec<Vec<f64>> {
    let e = q.rows();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt() + COSINE_EPS;
    (0..x.rows())
        .map(|row| {
            let xr = x.row(row);
            let cos: Vec<f64> = (0..e)
                .map(|j| xr.iter().zip(q.row(j)).map(|(a, b)| a * b).sum::<f64>() / (norm(xr) * norm(q.row(j))))
                .collect();
            let mut best: Option<(f64, Vec<usize>)> = None;
            for mask in 0u32..(1 << e) {
                if mask.count_ones() as usize != k {
                    continue;
                }
                let set: Vec<usize> = (0..e).filter(|&j| mask & (1 << j) != 0).collect();
                let score: f64 = set.iter().map(|&j| cos[j]).sum();
                let better = match &best {
                    None => true,
                    Some((s, b)) => score > *s || (score == *s && set < *b),
                };
                if better {
                    best = Some((score, set));
                }
            }
            let set = best.unwrap().1;
            let m = set.iter().map(|&j| cos[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = set.iter().map(|&j| (cos[j] - m).exp()).sum();
            let mut w = vec![0.0; e];
            for &j in &set {
                w[j] = (cos[j] - m).exp() / z;
            }
            w
        })
        .collect()
}

fn naive_matmul(a: &NdArray, b: &NdArray) -> NdArray {
    let mut out = NdArray::zeros(&[a.rows(), b.cols()]);
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let s: f64 = (0..a.cols()).map(|t| a.get(i, t) * b.get(t, j)).sum();
            out.set(i, j, s);
        }
    }
    out
}

fn routing_gap(got: &RoutingResult, want: &[Vec<f64>]) -> f64 {
    let mut gap = 0.0f64;
    for (r, w) in want.iter().enumerate() {
        for (j, &wj) in w.iter().enumerate() {
            let g = got.weights.get(r, j);
            if (g > 0.0) != (wj > 0.0) {
                return f64::INFINITY;
            }
            gap = gap.max((g - wj).abs());
        }
        let expected: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
        if got.active[r] != expected {
            return f64::INFINITY;
        }
    }
    gap
}

fn rbm_layer(q: NdArray, k: usize, r: &mut Rng) -> RbmLayer {
    let (e, d) = (q.rows(), q.cols());
    RbmLayer {
        experts: (0..e).map(|_| Linear::init(d, 2, r)).collect(),
        att: NdArray::zeros(&[e, d]),
        s: NdArray::scalar(0.0),
        q,
        k,
    }
}

fn criterion_routing() -> Outcome {
    let name = "routing oracle";
    let run = || -> Result<(f64, usize, usize, usize)> {
        let mut worst = 0.0f64;
        let (mut dense, mut ties) = (0, 0);
        let mut r = rng::stream(0, "acceptance.routing", 0);
        let total = 1000;
        for inst in 0..total {
            let e = r.random_range(1..=8);
            let d = r.random_range(1..=16);
            let n = r.random_range(1..=6);
            // Every 10th instance is dense (k = E); every 10th (offset 5)
            // duplicates memory rows so routing faces exact ties.
            let k = if inst % 10 == 0 { e } else { r.random_range(1..=e) };
            let x = uniform(&mut r, n, d, -1.0, 1.0);
            if inst % 2 == 0 {
                let mut q = uniform(&mut r, e, d, -1.0, 1.0);
                if inst % 10 == 5 && e >= 2 {
                    let src = q.row(e - 1).to_vec();
                    q.row_mut(0).copy_from_slice(&src);
                    ties += 1;
                }
                let want = oracle_weights(&x, &q, k);
                let got = route_rbm(&rbm_layer(q, k, &mut r), &x)?;
                worst = worst.max(routing_gap(&got, &want));
            } else {
                let p = r.random_range(1..=16);
                let proj = uniform(&mut r, d, p, -1.0, 1.0);
                let q = uniform(&mut r, e, p, -1.0, 1.0);
                let want = oracle_weights(&naive_matmul(&x, &proj), &q, k);
                let layer = MoeLayer {
                    experts: (0..e).map(|_| Linear::init(d, 2, &mut r)).collect(),
                    q,
                    proj,
                    att: NdArray::zeros(&[e, d]),
                    s: NdArray::scalar(0.0),
                    k,
                };
                worst = worst.max(routing_gap(&route_moe(&layer, &x)?, &want));
            }
            if k == e {
                dense += 1;
            }
        }
        // Symmetric tie: two identical memories and k = 2 split 0.5/0.5;
        // with k = 1 the lower index wins.
        let q = NdArray::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0])?;
        let x = NdArray::matrix(1, 2, vec![2.0, 0.5])?;
        let two = route_rbm(&rbm_layer(q.clone(), 2, &mut r), &x)?;
        let one = route_rbm(&rbm_layer(q, 1, &mut r), &x)?;
        if two.weights.row(0) != [0.5, 0.5, 0.0] || one.active[0] != [0] || one.weights.row(0) != [1.0, 0.0, 0.0] {
            worst = f64::INFINITY;
        }
        Ok((worst, total, dense, ties + 1))
    };
    match run() {
        Ok((worst, total, dense, ties)) => Outcome::new(
            2,
            name,
            worst <= 1e-9,
            format!(
                "max |w - oracle| {:.1e} <= 1e-9 over {} instances ({} dense k=E, {} with exact ties incl. 0.5/0.5)",
                worst, total, dense, ties
            ),
        ),
        Err(e) => Outcome::failed(2, name, e),
    }
}

fn frobenius(a: &NdArray, b: &NdArray) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One memory update computed directly: per expert, a batch softmax over
/// the gates of its routed samples weights their inputs.
fn ema_oracle(q: &NdArray, h: &NdArray, gates: &NdArray, lambda: f64) -> NdArray {
    let mut out = q.clone();
    for i in 0..q.rows() {
        let routed: Vec<usize> = (0..h.rows()).filter(|&j| gates.get(j, i) != 0.0).collect();
        if routed.is_empty() {
            continue;
        }
        let z: f64 = routed.iter().map(|&j| gates.get(j, i).exp()).sum();
        for c in 0..q.cols() {
            let target: f64 = routed.iter().map(|&j| gates.get(j, i).exp() / z * h.get(j, c)).sum();
            out.set(i, c, lambda * q.get(i, c) + (1.0 - lambda) * target);
        }
    }
    out
}

fn criterion_ema() -> Outcome {
    let name = "EMA contract";
    let run = || -> Result<(bool, f64, f64, f64, f64, usize, f64, bool)> {
        let mut r = rng::stream(0, "acceptance.ema", 0);
        let mut identity = true;
        let mut step_gap = 0.0f64;
        for _ in 0..50 {
            let (n, d, e) = (r.random_range(1..30), r.random_range(1..10), r.random_range(1..6));
            let q = uniform(&mut r, e, d, -1.0, 1.0);
            let h = uniform(&mut r, n, d, -1.0, 1.0);
            let k = r.random_range(1..=e);
            let routing = route_rbm(&rbm_layer(q.clone(), k, &mut r), &h)?;
            let mut q2 = q.clone();
            ema_update(&mut q2, &h, &routing, 1.0)?;
            identity &= bits(&q2) == bits(&q);

            let lambda = r.random_range(0.0..1.0);
            let mut q3 = q.clone();
            ema_update(&mut q3, &h, &routing, lambda)?;
            step_gap = step_gap.max(frobenius(&q3, &ema_oracle(&q, &h, &routing.weights, lambda)));
        }

        // Fixed batch, routing recomputed from the current memory each step.
        // With k = 1 every routed gate is 1, so the target is the plain mean
        // of the assigned inputs; at the student's default sizes the gate
        // weighting moves the target only slightly with Q.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut ratios = 0;
        let mut enough = true;
        let cases = [(60, 6, 4, 1), (500, 64, 8, 3)];
        for (seed, &(b, d, e, k)) in (0..).zip(cases.iter().flat_map(|c| std::iter::repeat_n(c, 3))) {
            let mut r = rng::stream(seed, "acceptance.ema.decay", 0);
            let h = uniform(&mut r, b, d, -1.0, 1.0);
            let mut layer = rbm_layer(uniform(&mut r, e, d, -1.0, 1.0), k, &mut r);
            let steps = 300;
            let mut disp = Vec::with_capacity(steps);
            let mut active = Vec::with_capacity(steps);
            for _ in 0..steps {
                let routing = route_rbm(&layer, &h)?;
                let before = layer.q.clone();
                ema_update(&mut layer.q, &h, &routing, 0.9)?;
                disp.push(frobenius(&layer.q, &before));
                active.push(routing.active);
            }
            // A ratio counts once the assignment has held for five steps and
            // the displacement is still above roundoff.
            let window: Vec<f64> = (5..steps)
                .filter(|&t| active[t - 4..=t].iter().all(|a| *a == active[t]) && disp[t - 1] > 1e-10)
                .map(|t| disp[t] / disp[t - 1])
                .collect();
            enough &= window.len() >= 10;
            ratios += window.len();
            for x in window {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        let cfg = AnnealConfig {
            lambda0: 0.9,
            horizon: 200.0,
            delta: 0.05,
        };
        Ok((identity, lo, hi, anneal_lambda(0, &cfg), anneal_lambda(200, &cfg), ratios, step_gap, enough))
    };
    match run() {
        Ok((identity, lo, hi, l0, l200, ratios, step_gap, enough)) => {
            let ratio_ok = enough && (lo - 0.9).abs() <= 0.01 && (hi - 0.9).abs() <= 0.01;
            let sched_ok = (l0 - 0.9).abs() < 1e-12 && (l200 - 0.905).abs() < 1e-12;
            Outcome::new(
                3,
                name,
                identity && step_gap < 1e-12 && ratio_ok && sched_ok,
                format!(
                    "lambda_hat=1 bitwise identity {}; one-step oracle gap {:.1e}; displacement ratio in [{:.4}, {:.4}] over {} steps with settled assignments (k=1 and d'=64,E=8,k=3 batches); lambda(0)={:.4} lambda(200)={:.4}",
                    identity, step_gap, lo, hi, ratios, l0, l200
                ),
            )
        }
        Err(e) => Outcome::failed(3, name, e),
    }
}

fn cora() -> Result<SparseGraph> {
    load_bundle(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cora"))
}

fn criterion_protocol(g: &SparseGraph, cfg: &RunConfig) -> Outcome {
    let name = "protocol soundness";
    let run = || -> Result<(bool, bool, bool, String)> {
        let mut sizes_ok = true;
        let mut audit_ok = true;
        let full_edges = g.edges();
        let mut audited = 0usize;
        let mut removed = 0usize;
        for seed in 0..10 {
            let s = split_for(g, SplitMode::Inductive, cfg, seed)?;
            let n = g.num_nodes();
            let unlabeled = n - s.labeled.len() - s.val.len();
            sizes_ok &= s.inductive.len() == inductive_count(unlabeled)
                && s.inductive.len() == (0.2 * unlabeled as f64).round() as usize
                && s.labeled.len() + s.val.len() + s.test.len() + s.inductive.len() == n;
            s.validate(n)?;
            let held: Vec<bool> = (0..n).map(|v| s.inductive.binary_search(&v).is_ok()).collect();
            let cut = cut_inductive_edges(g, &s)?;
            let kept = cut.edges();
            let expected: Vec<(usize, usize)> =
                full_edges.iter().copied().filter(|&(u, v)| !held[u] && !held[v]).collect();
            audit_ok &= kept == expected
                && cut.num_nodes() == n
                && cut.labels() == g.labels()
                && bits(cut.features()) == bits(g.features())
                && (0..n).all(|v| !held[v] || cut.degree(v) == 0)
                && (0..n).all(|v| cut.neighbors(v).unwrap().iter().all(|&u| !held[u]));
            audited += full_edges.len();
            removed += full_edges.len() - kept.len();
        }

        // One full inductive training run through an access-tracking source.
        let seed = 0;
        let config = cfg.seeded(seed);
        let s = split_for(g, SplitMode::Inductive, cfg, seed)?;
        let cut = cut_inductive_edges(g, &s)?;
        let tracked = TrackedSource::new(&cut);
        let view = training_view(&tracked, &s)?;
        let (arts, walk) = harness::train_on_view(&view, &config)?;
        let data = DistillData {
            graph: &view.graph,
            inputs: &arts.inputs,
            labeled: &view.split.labeled,
            val: &view.split.val,
            soft: &arts.soft,
            reliability: &arts.reliability,
        };
        let (model, _) = distill::train_student(StudentKind::Rbm, &config.arch, &data, &config.distill)?;
        let exposed = tracked.exposed(&s.inductive);
        let leak_ok = exposed.is_empty() && view.graph.num_nodes() + s.inductive.len() == g.num_nodes();
        let pos = harness::full_positions(g, &view, &walk, &config.walk)?;
        let inputs = poswalk::student_input(g.features(), &pos)?;
        let (logits, _) = students::student_forward(&model, &inputs)?;
        let acc = harness::accuracy(&logits, g.labels(), &s.inductive)?;
        let detail = format!(
            "inductive sets = round(20% of unlabeled) = {} on 10 seeds: {}; {} edges audited, {} cut, audit {}; tracked training read {} nodes, {} held-out nodes exposed; RbM inductive acc {:.4}",
            s.inductive.len(),
            sizes_ok,
            audited,
            removed,
            if audit_ok { "clean" } else { "FAILED" },
            tracked.reads(),
            exposed.len(),
            acc
        );
        Ok((sizes_ok, audit_ok, leak_ok, detail))
    };
    match run() {
        Ok((a, b, c, detail)) => Outcome::new(8, name, a && b && c, detail),
        Err(e) => Outcome::failed(8, name, e),
    }
}

/// Independent nearest-centroid classifier.
fn centroid_accuracy(x: &NdArray, labels: &[usize], classes: usize) -> f64 {
    let mut cent = vec![vec![0.0; x.cols()]; classes];
    let mut count = vec![0.0; classes];
    for (i, &l) in labels.iter().enumerate() {
        count[l] += 1.0;
        cent[l].iter_mut().zip(x.row(i)).for_each(|(c, v)| *c += v);
    }
    for (c, n) in cent.iter_mut().zip(&count) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let d: Vec<f64> = cent.iter().map(|c| c.iter().zip(x.row(i)).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            (0..classes).all(|j| d[l] <= d[j])
        })
        .count();
    correct as f64 / labels.len() as f64
}

fn criterion_deepwalk() -> Outcome {
    let name = "DeepWalk sanity";
    let run = || -> Result<(f64, f64, f64)> {
        let g = sbm(&SbmSpec::default())?;
        // The classifier must score a constructed separable table perfectly.
        let mut r = rng::stream(0, "acceptance.deepwalk", 0);
        let sep = NdArray::matrix(
            200,
            2,
            (0..200)
                .flat_map(|v| {
                    let c = if g.labels()[v] == 0 { 1.0 } else { -1.0 };
                    [c + r.random_range(-0.4..0.4), r.random_range(-1.0..1.0)]
                })
                .collect(),
        )?;
        let oracle = centroid_accuracy(&sep, g.labels(), 2);
        let walk = poswalk::deepwalk(&g, &WalkConfig::default())?;
        let acc = centroid_accuracy(&walk.center, g.labels(), 2);
        let lib = synth::nearest_centroid_accuracy(&walk.center, g.labels(), 2);
        Ok((oracle, acc, lib))
    };
    match run() {
        Ok((oracle, acc, lib)) => Outcome::new(
            9,
            name,
            oracle == 1.0 && acc >= 0.95 && (acc - lib).abs() < 1e-12,
            format!(
                "2-block SBM, 200 nodes: nearest-centroid accuracy {:.3} >= 0.95 (constructed separable table {:.3})",
                acc, oracle
            ),
        ),
        Err(e) => Outcome::failed(9, name, e),
    }
}

/// Results of the Cora transductive sweep.
#[derive(Default)]
struct Sweep {
    teacher: Vec<f64>,
    rbm: Vec<RunResult>,
    moe: Vec<RunResult>,
    ablations: Vec<RunResult>,
    lb_strong: Vec<RunResult>,
    determinism: Option<std::result::Result<String, String>>,
    seconds_per_seed: Vec<f64>,
}

const SEEDS: u64 = 10;
const SMALL_SEEDS: u64 = 5;

fn run(prep: &Prepared, kind: StudentKind, cfg: &DistillConfig, variant: &str) -> Result<(StudentModel, RunResult)> {
    train_and_evaluate(prep, kind, &prep.config.arch, cfg, variant, false)
}


/// Serialized teacher, soft labels, reliability, inputs, student checkpoint
/// and results line of one seed.
fn fingerprint(prep: &Prepared, model: StudentModel, result: &RunResult, dir: &std::path::Path) -> Result<Vec<Vec<u8>>> {
    let path = dir.join("results.jsonl");
    append_results(&path, std::slice::from_ref(result))?;
    let ck = StudentCheckpoint::new(model, prep.seed);
    Ok(vec![
        serde_json::to_vec(&prep.artifacts.teacher)?,
        format!("{:?}", bits(&prep.artifacts.soft)).into_bytes(),
        format!("{:?}", prep.artifacts.reliability.rho.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).into_bytes(),
        format!("{:?}", bits(&prep.inputs_full)).into_bytes(),
        serde_json::to_vec(&ck)?,
        std::fs::read(&path)?,
    ])
}

fn cora_sweep(g: &SparseGraph, cfg: &RunConfig) -> Result<Sweep> {
    let mut sw = Sweep::default();
    let variants = harness::ablation_variants(&cfg.distill);
    let lb_strong = DistillConfig {
        gamma_lb: 0.05,
        ..cfg.distill.clone()
    };
    for seed in 0..SEEDS {
        let start = Instant::now();
        let split = split_for(g, SplitMode::Transductive, cfg, seed)?;
        let prep = prepare(g, "cora", split.clone(), cfg, seed)?;
        sw.teacher.push(prep.teacher_test);
        let (model, rbm) = run(&prep, StudentKind::Rbm, &prep.config.distill, "full")?;
        eprintln!(
            "  seed {}: teacher {:.4} rbm {:.4} ({:.0} s)",
            seed,
            prep.teacher_test,
            rbm.test_acc,
            start.elapsed().as_secs_f64()
        );
        sw.seconds_per_seed.push(start.elapsed().as_secs_f64());
        if seed == 0 {
            let a = tempfile::tempdir()?;
            let b = tempfile::tempdir()?;
            let first = fingerprint(&prep, model, &rbm, a.path())?;
            let prep2 = prepare(g, "cora", split, cfg, seed)?;
            let (model2, rbm2) = run(&prep2, StudentKind::Rbm, &prep2.config.distill, "full")?;
            let second = fingerprint(&prep2, model2, &rbm2, b.path())?;
            let names = ["teacher", "soft labels", "reliability", "student inputs", "student checkpoint", "results line"];
            let differing: Vec<&str> = names.iter().zip(first.iter().zip(&second)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
            let bytes: usize = first.iter().map(Vec::len).sum();
            sw.determinism = Some(if differing.is_empty() {
                Ok(format!("{} artifacts ({} bytes) identical across two runs of Cora seed 0", names.len(), bytes))
            } else {
                Err(format!("differing: {}", differing.join(", ")))
            });
        }
        if seed < SMALL_SEEDS {
            sw.moe.push(run(&prep, StudentKind::Moe, &prep.config.distill, "full")?.1);
            for (name, vcfg) in variants.iter().filter(|(n, _)| *n != "full") {
                sw.ablations.push(run(&prep, StudentKind::Rbm, vcfg, name)?.1);
            }
            sw.lb_strong.push(run(&prep, StudentKind::Rbm, &lb_strong, "gamma_lb=0.05")?.1);
            eprintln!("  seed {}: moe, ablations and load-balance runs done", seed);
        }
        sw.rbm.push(rbm);
    }
    Ok(sw)
}

fn accs(rs: &[RunResult]) -> Vec<f64> {
    rs.iter().map(|r| r.test_acc).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sweep_outcomes(sw: &Sweep) -> Vec<Outcome> {
    let mut out = Vec::new();

    let (t_mean, t_std) = mean_std(&sw.teacher);
    let (r_mean, r_std) = mean_std(&accs(&sw.rbm));
    let slowest = sw.seconds_per_seed.iter().cloned().fold(0.0, f64::max);
    out.push(Outcome::new(
        4,
        "Cora accuracy",
        t_mean >= 0.78 && r_mean >= t_mean - 0.01 && r_mean >= 0.82 && slowest < 600.0,
        format!(
            "10 seeds: teacher {:.4} +/- {:.4} (>= 0.78), RbM {:.4} +/- {:.4} (>= teacher - 0.01 = {:.4} and >= 0.82); slowest seed {:.0} s",
            t_mean,
            t_std,
            r_mean,
            r_std,
            t_mean - 0.01,
            slowest
        ),
    ));

    let full = mean(&accs(&sw.rbm[..SMALL_SEEDS as usize]));
    let mut ok = true;
    let mut parts = vec![format!("full {:.4}", full)];
    for name in ["w/o VQ", "w/o SS", "w/o LB", "KD-only"] {
        let m = mean(&sw.ablations.iter().filter(|r| r.variant == name).map(|r| r.test_acc).collect::<Vec<_>>());
        ok &= full >= m - 0.005;
        parts.push(format!("{} {:.4}", name, m));
    }
    out.push(Outcome::new(
        5,
        "ablation direction",
        ok,
        format!("5 seeds, full >= each variant - 0.005: {}", parts.join(", ")),
    ));

    let nmi = |rs: &[RunResult]| mean(&rs.iter().map(|r| r.expert_label_nmi.unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let (rn, mn) = (nmi(&sw.rbm[..SMALL_SEEDS as usize]), nmi(&sw.moe));
    out.push(Outcome::new(
        6,
        "expert specialization",
        rn > mn,
        format!("5-seed mean NMI(top expert, class): RbM {:.4} > MoE {:.4}", rn, mn),
    ));

    let cv = |rs: &[RunResult]| mean(&rs.iter().map(|r| r.load_cv.unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let without: Vec<RunResult> = sw.ablations.iter().filter(|r| r.variant == "w/o LB").cloned().collect();
    let (strong, none) = (cv(&sw.lb_strong), cv(&without));
    out.push(Outcome::new(
        7,
        "load balance",
        strong <= none,
        format!("5-seed mean expert-load CV: gamma_lb=0.05 {:.4} <= gamma_lb=0 {:.4}", strong, none),
    ));

    out.push(match &sw.determinism {
        Some(Ok(d)) => Outcome::new(10, "determinism", true, d.clone()),
        Some(Err(d)) => Outcome::new(10, "determinism", false, d.clone()),
        None => Outcome::new(10, "determinism", false, "not run".into()),
    });
    out
}

/// Criteria selected by `ACCEPTANCE_ONLY` (comma-separated ids); all by
/// default.
fn selected() -> Vec<usize> {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(v) if !v.trim().is_empty() => v.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        _ => (1..=10).collect(),
    }
}

fn main() {
    let t0 = Instant::now();
    let want = selected();
    let mut outcomes = Vec::new();
    let quick: [(usize, &str, fn() -> Outcome); 4] = [
        (1, "gradient suite", criterion_gradients),
        (2, "routing oracle", criterion_routing),
        (3, "EMA contract", criterion_ema),
        (9, "DeepWalk sanity", criterion_deepwalk),
    ];
    for (id, name, f) in quick {
        if want.contains(&id) {
            eprintln!("acceptance: {}", name);
            outcomes.push(f());
        }
    }
    let sweep_ids = [
        (4, "Cora accuracy"),
        (5, "ablation direction"),
        (6, "expert specialization"),
        (7, "load balance"),
        (10, "determinism"),
    ];
    let needs_sweep = sweep_ids.iter().any(|(id, _)| want.contains(id));
    if want.contains(&8) || needs_sweep {
        let cfg = RunConfig::default();
        match cora() {
            Ok(g) => {
                if want.contains(&8) {
                    eprintln!("acceptance: inductive protocol on Cora");
                    outcomes.push(criterion_protocol(&g, &cfg));
                }
                if needs_sweep {
                    eprintln!("acceptance: Cora transductive sweep ({} seeds)", SEEDS);
                    match cora_sweep(&g, &cfg) {
                        Ok(sw) => outcomes.extend(sweep_outcomes(&sw)),
                        Err(e) => outcomes.extend(sweep_ids.iter().map(|&(id, n)| Outcome::failed(id, n, &e))),
                    }
                }
            }
            Err(e) => {
                let ids = sweep_ids.iter().copied().chain([(8, "protocol soundness")]);
                outcomes.extend(ids.map(|(id, n)| Outcome::failed(id, n, &e)));
            }
        }
    }
    outcomes.retain(|o| want.contains(&o.id));
    outcomes.sort_by_key(|o| o.id);
    println!();
    for o in &outcomes {
        println!("{} {:>2} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {}/{} criteria passed in {:.0} s", passed, outcomes.len(), t0.elapsed().as_secs_f64());
    if passed < outcomes.len() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
