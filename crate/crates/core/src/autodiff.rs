//! Tape-based reverse-mode automatic differentiation over [`NdArray`] values.
//!
//! A [`Tape`] records every primitive applied to its variables. Leaves are
//! either parameters (gradients requested) or constants. [`Tape::backward`]
//! walks the tape in reverse from a scalar root and returns a [`Gradients`]
//! map. Nodes that no parameter flows into are skipped during the backward
//! pass, so constant inputs such as node-feature matrices never pay for a
//! gradient.
//!
//! [`Tape::stop_gradient`] copies a value but cuts the edge to its parent:
//! anything computed from the copy contributes nothing to the parent's
//! gradient.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::{dot, norm, softmax_in_place, NdArray};

/// Added to vector norms inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    SpMM(Rc<CsrMatrix>, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    LogSoftmax(Var),
    Softmax(Var),
    MaskedSoftmax(Var, Rc<Vec<bool>>),
    Cosine(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Variance(Var),
    Column(Var, usize),
    SelectRows(Var, Rc<Vec<usize>>),
    SliceRows(Var, usize),
    ConcatCols(Var, Var),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad => "stop_gradient",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::SpMM(..) => "spmm",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Square(..) => "square",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Softmax(..) => "softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::Cosine(..) => "cosine",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::Variance(..) => "variance",
            Op::Column(..) => "column",
            Op::SelectRows(..) => "select_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> NdArray {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| NdArray::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> NdArray {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| NdArray::zeros(&self.shapes[v.0]))
    }
}

fn matrix(op: &'static str, a: &NdArray) -> Result<()> {
    if !a.is_matrix() {
        return Err(Error::shape(op, a.shape(), &[0, 0]));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: NdArray, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.tag()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, value: NdArray, op: Op) -> Result<Var> {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: NdArray, op: Op) -> Result<Var> {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// Leaf whose gradient is requested.
    pub fn param(&mut self, value: NdArray) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: NdArray) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        self.binary(a, b, value, Op::MatMulT(a, b))
    }

    /// Sparse operator applied to a dense variable.
    pub fn spmm(&mut self, op: Rc<CsrMatrix>, x: Var) -> Result<Var> {
        let value = op.spmm(self.value(x))?;
        self.unary(x, value, Op::SpMM(op, x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        self.unary(x, value, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.binary(a, b, value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        self.binary(a, b, value, Op::Div(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        matrix("add_row", av)?;
        if rv.len() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut value = av.clone();
        let c = av.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += rv.data()[i % c];
        }
        self.binary(a, row, value, Op::AddRow(a, row))
    }

    /// Multiplies column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        matrix("mul_row", av)?;
        if rv.len() != av.cols() {
            return Err(Error::shape("mul_row", av.shape(), rv.shape()));
        }
        let mut value = av.clone();
        let c = av.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= rv.data()[i % c];
        }
        self.binary(a, row, value, Op::MulRow(a, row))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        matrix("mul_col", av)?;
        if cv.len() != av.rows() {
            return Err(Error::shape("mul_col", av.shape(), cv.shape()));
        }
        let mut value = av.clone();
        let c = av.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= cv.data()[i / c];
        }
        self.binary(a, col, value, Op::MulCol(a, col))
    }

    /// Multiplies every entry of `a` by the scalar variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::shape("mul_scalar", self.value(a).shape(), sv.shape()));
        }
        let k = sv.data()[0];
        let value = self.value(a).scale(k);
        self.binary(a, s, value, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).scale(c);
        self.unary(x, value, Op::Scale(x, c))
    }

    /// ReLU; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::ln);
        self.unary(x, value, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.unary(x, value, Op::Square(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        matrix("log_softmax", xv)?;
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(xv.cols().max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.unary(x, value, Op::LogSoftmax(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        matrix("softmax", xv)?;
        let value = xv.softmax_rows();
        self.unary(x, value, Op::Softmax(x))
    }

    /// Row-wise softmax over the entries where `mask` is set; other entries
    /// are exactly zero. Every row needs at least one masked-in entry.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        matrix("masked_softmax", xv)?;
        if mask.len() != xv.len() {
            return Err(Error::shape("masked_softmax", xv.shape(), &[mask.len()]));
        }
        let c = xv.cols();
        let mut value = NdArray::zeros(xv.shape());
        let mut buf = Vec::with_capacity(c);
        for r in 0..xv.rows() {
            let m = &mask[r * c..(r + 1) * c];
            buf.clear();
            buf.extend(xv.row(r).iter().zip(m).filter(|(_, &on)| on).map(|(&v, _)| v));
            if buf.is_empty() {
                return Err(Error::invalid(format!("masked_softmax: row {} fully masked", r)));
            }
            softmax_in_place(&mut buf);
            let mut it = buf.iter();
            for (o, &on) in value.row_mut(r).iter_mut().zip(m) {
                if on {
                    *o = *it.next().unwrap();
                }
            }
        }
        self.unary(x, value, Op::MaskedSoftmax(x, Rc::new(mask)))
    }

    /// Pairwise cosine similarity between the rows of `a` (`n x d`) and the
    /// rows of `b` (`m x d`), giving `n x m`. Each norm is offset by
    /// [`COSINE_EPS`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = cosine_matrix(self.value(a), self.value(b))?;
        self.binary(a, b, value, Op::Cosine(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = NdArray::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::invalid("mean of an empty array"));
        }
        let value = NdArray::scalar(xv.sum() / xv.len() as f64);
        self.unary(x, value, Op::Mean(x))
    }

    /// Column sums as a `1 x c` row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        matrix("sum_rows", xv)?;
        let c = xv.cols();
        let mut out = vec![0.0; c];
        for r in 0..xv.rows() {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        self.unary(x, NdArray::row_vector(out), Op::SumRows(x))
    }

    /// Population variance over all entries.
    pub fn variance(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::invalid("variance of an empty array"));
        }
        let n = xv.len() as f64;
        let mu = xv.sum() / n;
        let var = xv.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        self.unary(x, NdArray::scalar(var), Op::Variance(x))
    }

    /// Column `j` as an `r x 1` vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let xv = self.value(x);
        matrix("column", xv)?;
        if j >= xv.cols() {
            return Err(Error::invalid(format!("column {} of {:?}", j, xv.shape())));
        }
        let data = (0..xv.rows()).map(|r| xv.get(r, j)).collect();
        self.unary(x, NdArray::col_vector(data), Op::Column(x, j))
    }

    pub fn select_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).select_rows(&idx)?;
        self.unary(x, value, Op::SelectRows(x, idx))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        matrix("slice_rows", xv)?;
        if start > end || end > xv.rows() {
            return Err(Error::invalid(format!("rows {}..{} of {:?}", start, end, xv.shape())));
        }
        let c = xv.cols();
        let value = NdArray::matrix(end - start, c, xv.data()[start * c..end * c].to_vec())?;
        self.unary(x, value, Op::SliceRows(x, start))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        self.binary(a, b, value, Op::ConcatCols(a, b))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<NdArray>> = vec![None; n];
        grads[root.0] = Some(NdArray::filled(rv.shape(), 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<NdArray>], v: Var, g: NdArray) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape(), "grad shape for {}", self.op_tag(v));
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &NdArray, grads: &mut [Option<NdArray>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a))?);
                }
            }
            Op::SpMM(op, x) => {
                self.accumulate(grads, *x, op.spmm_t(g)?);
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, g.transpose()?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, "div", |x, y| x / y)?);
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let t = g.zip_map(out, "div", |x, y| x * y)?;
                    self.accumulate(grads, *b, t.zip_map(bv, "div", |x, y| -x / y)?);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let sums = column_sums(g);
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, NdArray::new(shape, sums)?);
                }
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row);
                let c = av.cols();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for (k, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= rv.data()[k % c];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*row) {
                    let mut sums = vec![0.0; c];
                    for (k, (gv, xv)) in g.data().iter().zip(av.data()).enumerate() {
                        sums[k % c] += gv * xv;
                    }
                    self.accumulate(grads, *row, NdArray::new(rv.shape().to_vec(), sums)?);
                }
            }
            Op::MulCol(a, col) => {
                let av = self.value(*a);
                let cv = self.value(*col);
                let c = av.cols();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for (k, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= cv.data()[k / c];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*col) {
                    let sums: Vec<f64> = (0..av.rows()).map(|r| dot(g.row(r), av.row(r))).collect();
                    self.accumulate(grads, *col, NdArray::new(cv.shape().to_vec(), sums)?);
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s);
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.scale(sv.data()[0]));
                }
                if self.rg(*s) {
                    let total = dot(g.data(), self.value(*a).data());
                    self.accumulate(grads, *s, NdArray::new(sv.shape().to_vec(), vec![total])?);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.scale(*c));
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, g.zip_map(out, "exp", |a, b| a * b)?);
            }
            Op::Ln(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), "ln", |a, b| a / b)?);
            }
            Op::Square(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), "square", |a, b| 2.0 * a * b)?);
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let mut gx = g.clone();
                for r in 0..out.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (j, v) in gx.row_mut(r).iter_mut().enumerate() {
                        *v -= out.data()[r * c + j].exp() * total;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let mut gx = g.clone();
                for r in 0..out.rows() {
                    let inner = dot(g.row(r), out.row(r));
                    for (v, &y) in gx.row_mut(r).iter_mut().zip(out.row(r)) {
                        *v = y * (*v - inner);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MaskedSoftmax(x, mask) => {
                let c = out.cols();
                let mut gx = NdArray::zeros(out.shape());
                for r in 0..out.rows() {
                    let m = &mask[r * c..(r + 1) * c];
                    let inner: f64 = (0..c).filter(|&j| m[j]).map(|j| g.get(r, j) * out.get(r, j)).sum();
                    for j in (0..c).filter(|&j| m[j]) {
                        gx.set(r, j, out.get(r, j) * (g.get(r, j) - inner));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Cosine(a, b) => {
                let (ga, gb) = cosine_backward(self.value(*a), self.value(*b), out, g, self.rg(*a), self.rg(*b))?;
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, NdArray::filled(&shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let k = g.data()[0] / xv.len() as f64;
                self.accumulate(grads, *x, NdArray::filled(xv.shape(), k));
            }
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = NdArray::zeros(xv.shape());
                for (k, v) in gx.data_mut().iter_mut().enumerate() {
                    *v = g.data()[k % c];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Variance(x) => {
                let xv = self.value(*x);
                let n = xv.len() as f64;
                let mu = xv.sum() / n;
                let k = 2.0 * g.data()[0] / n;
                self.accumulate(grads, *x, xv.map(|v| k * (v - mu)));
            }
            Op::Column(x, j) => {
                let xv = self.value(*x);
                let mut gx = NdArray::zeros(xv.shape());
                for r in 0..xv.rows() {
                    gx.set(r, *j, g.data()[r]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SelectRows(x, idx) => {
                let xv = self.value(*x);
                let mut gx = NdArray::zeros(xv.shape());
                for (k, &r) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = NdArray::zeros(xv.shape());
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(a, b) => {
                let c1 = self.value(*a).cols();
                let c2 = self.value(*b).cols();
                let r = out.rows();
                let mut ga = Vec::with_capacity(r * c1);
                let mut gb = Vec::with_capacity(r * c2);
                for k in 0..r {
                    let row = g.row(k);
                    ga.extend_from_slice(&row[..c1]);
                    gb.extend_from_slice(&row[c1..]);
                }
                self.accumulate(grads, *a, NdArray::matrix(r, c1, ga)?);
                self.accumulate(grads, *b, NdArray::matrix(r, c2, gb)?);
            }
        }
        Ok(())
    }
}

fn column_sums(g: &NdArray) -> Vec<f64> {
    let c = g.cols();
    let mut sums = vec![0.0; c];
    for r in 0..g.rows() {
        for (s, v) in sums.iter_mut().zip(g.row(r)) {
            *s += v;
        }
    }
    sums
}

/// Pairwise cosine similarity of rows, `n x d` against `m x d`.
pub fn cosine_matrix(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    matrix("cosine", a)?;
    matrix("cosine", b)?;
    if a.cols() != b.cols() {
        return Err(Error::shape("cosine", a.shape(), b.shape()));
    }
    let mut dots = a.matmul(&b.transpose()?)?;
    let na: Vec<f64> = (0..a.rows()).map(|r| norm(a.row(r)) + COSINE_EPS).collect();
    let nb: Vec<f64> = (0..b.rows()).map(|r| norm(b.row(r)) + COSINE_EPS).collect();
    let m = b.rows();
    for (k, v) in dots.data_mut().iter_mut().enumerate() {
        *v /= na[k / m] * nb[k % m];
    }
    Ok(dots)
}

fn cosine_backward(
    a: &NdArray,
    b: &NdArray,
    out: &NdArray,
    g: &NdArray,
    want_a: bool,
    want_b: bool,
) -> Result<(Option<NdArray>, Option<NdArray>)> {
    let (n, m) = (a.rows(), b.rows());
    let raw_a: Vec<f64> = (0..n).map(|r| norm(a.row(r))).collect();
    let raw_b: Vec<f64> = (0..m).map(|r| norm(b.row(r))).collect();
    let na: Vec<f64> = raw_a.iter().map(|v| v + COSINE_EPS).collect();
    let nb: Vec<f64> = raw_b.iter().map(|v| v + COSINE_EPS).collect();
    // g ⊙ out summed along each axis drives the radial terms.
    let go: Vec<f64> = g.data().iter().zip(out.data()).map(|(x, y)| x * y).collect();

    let ga = if want_a {
        // (1/na_i) Σ_j (g_ij / nb_j) b_j  −  (Σ_j g_ij out_ij) a_i / (na_i |a_i|)
        let mut scaled = g.clone();
        for (k, v) in scaled.data_mut().iter_mut().enumerate() {
            *v /= nb[k % m];
        }
        let mut ga = scaled.matmul(b)?;
        for i in 0..n {
            let radial: f64 = go[i * m..(i + 1) * m].iter().sum();
            let coef = if raw_a[i] > 0.0 { radial / (na[i] * raw_a[i]) } else { 0.0 };
            let a_row = a.row(i);
            for (v, &x) in ga.row_mut(i).iter_mut().zip(a_row) {
                *v = *v / na[i] - coef * x;
            }
        }
        Some(ga)
    } else {
        None
    };

    let gb = if want_b {
        let mut scaled = g.clone();
        for (k, v) in scaled.data_mut().iter_mut().enumerate() {
            *v /= na[k / m];
        }
        let mut gb = a.t_matmul(&scaled)?.transpose()?;
        for j in 0..m {
            let radial: f64 = (0..n).map(|i| go[i * m + j]).sum();
            let coef = if raw_b[j] > 0.0 { radial / (nb[j] * raw_b[j]) } else { 0.0 };
            let b_row = b.row(j);
            for (v, &x) in gb.row_mut(j).iter_mut().zip(b_row) {
                *v = *v / nb[j] - coef * x;
            }
        }
        Some(gb)
    } else {
        None
    };
    Ok((ga, gb))
}
