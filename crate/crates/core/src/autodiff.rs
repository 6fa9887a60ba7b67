//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order. [`Var`] is a cheap handle into the tape. [`Tape::backward`] walks
//! the records once in reverse and returns a [`Gradients`] map; the tape
//! itself is left untouched so it can be inspected or differentiated again.

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{GdeError, Result};
use crate::graph::GraphOp;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Softplus,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    MulConst(usize, Rc<Tensor>),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    LeakyRelu(usize, f64),
    Propagate(usize, Rc<GraphOp>),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Reshape(usize),
    Transpose(usize),
    OuterSum(usize, usize),
    MaskedSoftmaxRows(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterAddRows(usize, Rc<Vec<usize>>),
    CrossEntropy(usize, Rc<Vec<(usize, usize)>>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{r}x{c}]", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.grad_of(a);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.grad_of(a) || self.grad_of(b);
        self.push(value, op, rg)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(GdeError::Contract("loss is not recorded on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.shape() != (1, 1) {
            return Err(GdeError::Contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = vec![None; loss.id + 1];
        for (id, g) in grads.into_iter().enumerate() {
            if nodes[id].requires_grad && matches!(nodes[id].op, Op::Leaf) {
                out[id] = g;
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let wants = |id: usize| nodes[id].requires_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if wants(*a) {
                let bv = val(*b);
                let mut da = Tensor::zeros(g.rows, bv.rows);
                gemm(g, false, bv, true, &mut da, 0.0);
                accumulate(grads, nodes, *a, da);
            }
            if wants(*b) {
                let av = val(*a);
                let mut db = Tensor::zeros(av.cols, g.cols);
                gemm(av, true, g, false, &mut db, 0.0);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if wants(*b) {
                accumulate(grads, nodes, *b, g.scale(-1.0));
            }
        }
        Op::Hadamard(a, b) => {
            if wants(*a) {
                accumulate(grads, nodes, *a, g.zip_map(val(*b), |x, y| x * y));
            }
            if wants(*b) {
                accumulate(grads, nodes, *b, g.zip_map(val(*a), |x, y| x * y));
            }
        }
        Op::Scale(a, k) => accumulate(grads, nodes, *a, g.scale(*k)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if wants(*b) {
                let mut db = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    for (d, x) in db.data.iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::MulConst(a, m) => accumulate(grads, nodes, *a, g.zip_map(m, |x, y| x * y)),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, g.zip_map(y, |d, s| d * s * (1.0 - s))),
        Op::Tanh(a) => accumulate(grads, nodes, *a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
        Op::Relu(a) => {
            accumulate(grads, nodes, *a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 }))
        }
        Op::Softplus(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |d, x| d * sigmoid(x))),
        Op::LeakyRelu(a, slope) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { slope * d }),
        ),
        Op::Propagate(a, op) => {
            let da = op.apply_transpose(g).expect("shape checked in forward");
            accumulate(grads, nodes, *a, da);
        }
        Op::Sum(a) => {
            let av = val(*a);
            accumulate(grads, nodes, *a, Tensor::full(av.rows, av.cols, g.item()));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let k = g.item() / av.len() as f64;
            accumulate(grads, nodes, *a, Tensor::full(av.rows, av.cols, k));
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols;
                if wants(p) {
                    accumulate(grads, nodes, p, g.slice_cols(off, off + w));
                }
                off += w;
            }
        }
        Op::SliceCols(a, start) => {
            let av = val(*a);
            let mut da = Tensor::zeros(av.rows, av.cols);
            for i in 0..g.rows {
                da.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::Reshape(a) => {
            let av = val(*a);
            accumulate(grads, nodes, *a, g.reshape(av.rows, av.cols).expect("same length"));
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::OuterSum(col, row) => {
            if wants(*col) {
                let dc = Tensor::from_fn(g.rows, 1, |i, _| g.row(i).iter().sum());
                accumulate(grads, nodes, *col, dc);
            }
            if wants(*row) {
                let mut dr = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    for (d, x) in dr.data.iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                accumulate(grads, nodes, *row, dr);
            }
        }
        Op::MaskedSoftmaxRows(a) => {
            let mut da = Tensor::zeros(y.rows, y.cols);
            for i in 0..y.rows {
                let yr = y.row(i);
                let gr = g.row(i);
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                    *d = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let mut da = Tensor::zeros(av.rows, av.cols);
            for (e, &src) in idx.iter().enumerate() {
                for (d, x) in da.row_mut(src).iter_mut().zip(g.row(e)) {
                    *d += x;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::ScatterAddRows(a, idx) => {
            let av = val(*a);
            let mut da = Tensor::zeros(av.rows, av.cols);
            for (e, &dst) in idx.iter().enumerate() {
                da.row_mut(e).copy_from_slice(g.row(dst));
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::CrossEntropy(a, targets) => {
            let av = val(*a);
            let mut da = Tensor::zeros(av.rows, av.cols);
            let k = g.item() / targets.len() as f64;
            for &(row, label) in targets.iter() {
                let p = softmax(av.row(row));
                for (j, d) in da.row_mut(row).iter_mut().enumerate() {
                    let onehot = if j == label { 1.0 } else { 0.0 };
                    *d += k * (p[j] - onehot);
                }
            }
            accumulate(grads, nodes, *a, da);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x, 0) + log1p(exp(-|x|))`, finite for every finite `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_of(self.id)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(GdeError::shape(op, a, b));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.binary(self.id, other.id, v, Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        Ok(self.tape.binary(self.id, other.id, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        Ok(self.tape.binary(self.id, other.id, v, Op::Sub(self.id, other.id)))
    }

    pub fn hadamard(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "hadamard")?;
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        Ok(self.tape.binary(self.id, other.id, v, Op::Hadamard(self.id, other.id)))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        let v = self.value().scale(k);
        self.tape.unary(self.id, v, Op::Scale(self.id, k))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.tape.unary(self.id, v, Op::AddScalar(self.id))
    }

    /// `self + 1 * bias`, with `bias` a single row broadcast down the rows.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if bias.shape() != (1, c) {
            return Err(GdeError::shape("add_row", (r, c), bias.shape()));
        }
        let b = bias.value();
        let mut v = (*self.value()).clone();
        for i in 0..r {
            for (x, y) in v.row_mut(i).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        Ok(self.tape.binary(self.id, bias.id, v, Op::AddRow(self.id, bias.id)))
    }

    /// Hadamard product with a constant (e.g. a dropout mask).
    pub fn mul_const(&self, mask: Rc<Tensor>) -> Result<Var<'t>> {
        let v = self.value();
        v.ensure_same_shape(&mask, "mul_const")?;
        let out = v.zip_map(&mask, |a, b| a * b);
        Ok(self.tape.unary(self.id, out, Op::MulConst(self.id, mask)))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.tape.unary(self.id, v, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.tape.unary(self.id, v, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.unary(self.id, v, Op::Relu(self.id))
    }

    pub fn softplus(&self) -> Var<'t> {
        let v = self.value().map(softplus);
        self.tape.unary(self.id, v, Op::Softplus(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        self.tape.unary(self.id, v, Op::LeakyRelu(self.id, slope))
    }

    pub fn activate(&self, act: Activation) -> Var<'t> {
        match act {
            Activation::None => *self,
            Activation::Relu => self.relu(),
            Activation::Softplus => self.softplus(),
            Activation::Tanh => self.tanh(),
            Activation::Sigmoid => self.sigmoid(),
        }
    }

    /// Applies a graph operator to the node dimension (rows).
    pub fn propagate(&self, op: &Rc<GraphOp>) -> Result<Var<'t>> {
        let v = op.apply(&self.value())?;
        Ok(self.tape.unary(self.id, v, Op::Propagate(self.id, Rc::clone(op))))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.unary(self.id, v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let val = self.value();
        let v = Tensor::scalar(val.sum() / val.len() as f64);
        self.tape.unary(self.id, v, Op::Mean(self.id))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| GdeError::Contract("concat of zero tensors".into()))?
            .tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_cols(&refs)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if start >= end || end > c {
            return Err(GdeError::shape("slice_cols", (r, c), (start, end)));
        }
        let v = self.value().slice_cols(start, end);
        Ok(self.tape.unary(self.id, v, Op::SliceCols(self.id, start)))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value().reshape(rows, cols)?;
        Ok(self.tape.unary(self.id, v, Op::Reshape(self.id)))
    }

    pub fn transpose(&self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.unary(self.id, v, Op::Transpose(self.id))
    }

    /// `out[i][j] = col[i] + row[j]` for a column `m x 1` and a row `1 x n`.
    pub fn outer_sum(col: &Var<'t>, row: &Var<'t>) -> Result<Var<'t>> {
        let (m, c1) = col.shape();
        let (r1, n) = row.shape();
        if c1 != 1 || r1 != 1 {
            return Err(GdeError::shape("outer_sum", (m, c1), (r1, n)));
        }
        let cv = col.value();
        let rv = row.value();
        let v = Tensor::from_fn(m, n, |i, j| cv.data[i] + rv.data[j]);
        Ok(col.tape.binary(col.id, row.id, v, Op::OuterSum(col.id, row.id)))
    }

    /// Row-wise softmax restricted to entries where `mask` is nonzero; masked
    /// entries are exactly zero. Every row must have at least one live entry.
    pub fn masked_softmax_rows(&self, mask: Rc<Tensor>) -> Result<Var<'t>> {
        let x = self.value();
        x.ensure_same_shape(&mask, "masked_softmax_rows")?;
        let mut out = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let live: Vec<usize> = (0..x.cols).filter(|&j| mask.get(i, j) != 0.0).collect();
            if live.is_empty() {
                return Err(GdeError::Contract(format!("softmax row {i} is fully masked")));
            }
            let m = live.iter().map(|&j| x.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = live.iter().map(|&j| (x.get(i, j) - m).exp()).sum();
            for &j in &live {
                out.set(i, j, (x.get(i, j) - m).exp() / z);
            }
        }
        Ok(self.tape.unary(self.id, out, Op::MaskedSoftmaxRows(self.id)))
    }

    /// `out[e] = self[idx[e]]`.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let mut out = Tensor::zeros(idx.len(), x.cols);
        for (e, &src) in idx.iter().enumerate() {
            if src >= x.rows {
                return Err(GdeError::Index {
                    index: src,
                    len: x.rows,
                });
            }
            out.row_mut(e).copy_from_slice(x.row(src));
        }
        Ok(self.tape.unary(self.id, out, Op::GatherRows(self.id, idx)))
    }

    /// `out[idx[e]] += self[e]` into `n` zero-initialized rows.
    pub fn scatter_add_rows(&self, idx: Rc<Vec<usize>>, n: usize) -> Result<Var<'t>> {
        let x = self.value();
        if idx.len() != x.rows {
            return Err(GdeError::shape("scatter_add_rows", x.shape(), (idx.len(), x.cols)));
        }
        let mut out = Tensor::zeros(n, x.cols);
        for (e, &dst) in idx.iter().enumerate() {
            if dst >= n {
                return Err(GdeError::Index { index: dst, len: n });
            }
            for (o, v) in out.row_mut(dst).iter_mut().zip(x.row(e)) {
                *o += v;
            }
        }
        Ok(self.tape.unary(self.id, out, Op::ScatterAddRows(self.id, idx)))
    }

    /// Mean negative log-softmax likelihood over `(row, label)` targets.
    pub fn cross_entropy(&self, targets: Rc<Vec<(usize, usize)>>) -> Result<Var<'t>> {
        let x = self.value();
        if targets.is_empty() {
            return Err(GdeError::Contract("cross entropy over zero targets".into()));
        }
        let mut total = 0.0;
        for &(row, label) in targets.iter() {
            if row >= x.rows || label >= x.cols {
                return Err(GdeError::Index {
                    index: row.max(label),
                    len: x.rows.min(x.cols),
                });
            }
            let r = x.row(row);
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - r[label];
        }
        let v = Tensor::scalar(total / targets.len() as f64);
        Ok(self.tape.unary(self.id, v, Op::CrossEntropy(self.id, targets)))
    }
}

/// Gradients of a scalar loss with respect to every reachable
/// gradient-tracking leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros of the right shape when `var` did not influence the loss.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| {
            let (r, c) = var.shape();
            Tensor::zeros(r, c)
        })
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(800.0).is_finite());
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn hadamard_example() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[2.0, 3.0]]));
        let b = tape.constant(Tensor::from_rows(&[&[4.0, 5.0]]));
        assert_eq!(a.hadamard(&b).unwrap().value().data, vec![8.0, 15.0]);
        let c = tape.constant(Tensor::zeros(2, 1));
        assert!(a.hadamard(&c).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let g = tape.backward(w.sum()).unwrap();
        assert_eq!(g.get(&w).unwrap(), &Tensor::ones(2, 2));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::new();
        let w = tape.param(Tensor::zeros(2, 2));
        let g = tape.backward(w.sigmoid().sum()).unwrap();
        assert_eq!(g.get(&w).unwrap(), &Tensor::full(2, 2, 0.25));
    }

    #[test]
    fn matmul_gradient_against_b_column() {
        let tape = Tape::new();
        let a = tape.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
        let g = tape.backward(a.matmul(&b).unwrap().sum()).unwrap();
        assert_eq!(g.get(&a).unwrap(), &Tensor::ones(2, 2));
        assert!(g.get(&b).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(a), Err(GdeError::Contract(_))));
    }

    #[test]
    fn constants_never_get_gradients() {
        let tape = Tape::new();
        let p = tape.param(Tensor::ones(1, 2));
        let c = tape.constant(Tensor::ones(1, 2));
        let loss = p.hadamard(&c).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(&c).is_none());
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn backward_leaves_tape_reusable() {
        let tape = Tape::new();
        let p = tape.param(Tensor::from_rows(&[&[0.3, -0.7]]));
        let loss = p.tanh().hadamard(&p).unwrap().sum();
        let n = tape.len();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(tape.len(), n);
        assert_eq!(g1.get(&p).unwrap().data, g2.get(&p).unwrap().data);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]]));
        let mask = Rc::new(Tensor::from_rows(&[&[1.0, 0.0, 1.0], &[1.0, 1.0, 1.0]]));
        let y = x.masked_softmax_rows(mask).unwrap().value();
        assert_eq!(y.get(0, 1), 0.0);
        assert!((y.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((y.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 4));
        let l = x.cross_entropy(Rc::new(vec![(0, 1), (1, 3)])).unwrap();
        assert!((l.value().item() - 4f64.ln()).abs() < 1e-14);
    }
}
