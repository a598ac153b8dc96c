//! Building blocks shared by teacher and student models.

use std::rc::Rc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::NdArray;

/// Glorot-uniform `rows x cols` matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> NdArray {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    NdArray::matrix(rows, cols, data).expect("sized by construction")
}

/// Inverted dropout applied to a constant array. Zero entries are skipped,
/// which keeps sparse inputs sparse.
pub fn dropout_array(x: &NdArray, rate: f64, rng: &mut Rng) -> NdArray {
    if rate <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 / (1.0 - rate);
    x.map_nonzero(|v| if rng.random::<f64>() < rate { 0.0 } else { v * keep })
}

/// Inverted dropout on a tape variable via a constant mask.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = tape
        .value(x)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep });
    let m = tape.constant(mask)?;
    tape.mul(x, m)
}

/// `x + N(0, sigma^2)` elementwise.
pub fn gaussian_noise(x: &NdArray, sigma: f64, rng: &mut Rng) -> Result<NdArray> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(x.map(|v| v + normal.sample(rng)))
}

/// Mean cross-entropy of `logits` rows `nodes` against `labels[node]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, nodes: &[usize], labels: &[usize]) -> Result<Var> {
    if nodes.is_empty() {
        return Err(Error::invalid("cross-entropy over an empty node set"));
    }
    let c = tape.value(logits).cols();
    let picked = tape.select_rows(logits, Rc::new(nodes.to_vec()))?;
    let logp = tape.log_softmax(picked)?;
    let mut onehot = NdArray::zeros(&[nodes.len(), c]);
    for (r, &v) in nodes.iter().enumerate() {
        onehot.set(r, labels[v], 1.0);
    }
    let oh = tape.constant(onehot)?;
    let prod = tape.mul(logp, oh)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / nodes.len() as f64)
}

/// Fraction of `nodes` whose row argmax equals the label.
pub fn accuracy_of(pred: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes.iter().filter(|&&v| pred[v] == labels[v]).count();
    hits as f64 / nodes.len() as f64
}
