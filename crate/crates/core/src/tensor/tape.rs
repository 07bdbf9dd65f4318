//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass. [`Var`] is a
//! cheap copyable handle into it. [`Tape::backward`] walks the record in
//! reverse and returns the adjoint of every node; parameter adjoints can
//! then be folded into a [`ParamStore`]. Tapes are built per forward pass
//! and dropped afterwards.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops;
use std::rc::Rc;

use super::{gemm_acc, gemm_at_acc, gemm_bt_acc, ParamId, ParamStore, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Softplus(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Transpose(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    Gather(usize, Rc<Vec<usize>>),
    Softmax(usize),
    LayerNorm(usize, Vec<f64>),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    ClipNormRows(usize, f64),
    PairMean(usize, usize, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input that is not a parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Same as [`Tape::leaf`]; reads better where no gradient is wanted.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    /// Snapshot of a stored parameter. Repeated requests for the same id
    /// share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let nodes = self.nodes.borrow();
        let rows = nodes[parts[0].id].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let t = &nodes[p.id].value;
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = nodes[p.id].value.data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        drop(nodes);
        self.push(
            Tensor::from_raw(vec![rows, total], data),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        )
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let nodes = self.nodes.borrow();
        let cols = nodes[parts[0].id].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &nodes[p.id].value;
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        drop(nodes);
        self.push(
            Tensor::from_raw(vec![rows, cols], data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((i, p)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    let val = |id: usize| &nodes[id].value;
    match &nodes[i].op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul(a, b) => {
            let (m, k, n) = (val(a).rows(), val(a).cols(), val(b).cols());
            let da = acc(grads, a, m * k);
            gemm_bt_acc(m, n, k, g, val(b).data(), da);
            let db = acc(grads, b, k * n);
            gemm_at_acc(k, m, n, val(a).data(), g, db);
        }
        &Op::MatMulBt(a, b) => {
            let (m, k, n) = (val(a).rows(), val(a).cols(), val(b).rows());
            let da = acc(grads, a, m * k);
            gemm_acc(m, n, k, g, val(b).data(), da);
            let db = acc(grads, b, n * k);
            gemm_at_acc(n, m, k, g, val(a).data(), db);
        }
        &Op::Add(a, b) => {
            add_into(acc(grads, a, g.len()), g, 1.0);
            add_into(acc(grads, b, g.len()), g, 1.0);
        }
        &Op::Sub(a, b) => {
            add_into(acc(grads, a, g.len()), g, 1.0);
            add_into(acc(grads, b, g.len()), g, -1.0);
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += g[k] * bv[k];
            }
            let db = acc(grads, b, g.len());
            for k in 0..g.len() {
                db[k] += g[k] * av[k];
            }
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += g[k] / bv[k];
            }
            let db = acc(grads, b, g.len());
            for k in 0..g.len() {
                db[k] -= g[k] * av[k] / (bv[k] * bv[k]);
            }
        }
        &Op::AddRow(a, b) => {
            add_into(acc(grads, a, g.len()), g, 1.0);
            let n = out.cols();
            let db = acc(grads, b, n);
            for row in g.chunks(n) {
                add_into(db, row, 1.0);
            }
        }
        &Op::MulRow(a, b) => {
            let n = out.cols();
            let (av, bv) = (val(a).data(), val(b).data());
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += g[k] * bv[k % n];
            }
            let db = acc(grads, b, n);
            for k in 0..g.len() {
                db[k % n] += g[k] * av[k];
            }
        }
        &Op::MulCol(a, b) => {
            let n = out.cols();
            let m = out.rows();
            let (av, bv) = (val(a).data(), val(b).data());
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += g[k] * bv[k / n];
            }
            let db = acc(grads, b, m);
            for k in 0..g.len() {
                db[k / n] += g[k] * av[k];
            }
        }
        &Op::Scale(a, c) => add_into(acc(grads, a, g.len()), g, c),
        &Op::AddScalar(a) => add_into(acc(grads, a, g.len()), g, 1.0),
        &Op::Tanh(a) => {
            let y = out.data();
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += g[k] * (1.0 - y[k] * y[k]);
            }
        }
        &Op::Softplus(a) => {
            let x = val(a).data();
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += g[k] * sigmoid(x[k]);
            }
        }
        &Op::Sigmoid(a) => {
            let y = out.data();
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += g[k] * y[k] * (1.0 - y[k]);
            }
        }
        &Op::Exp(a) => {
            let y = out.data();
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += g[k] * y[k];
            }
        }
        &Op::Ln(a) => {
            let x = val(a).data();
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += g[k] / x[k];
            }
        }
        &Op::Relu(a) => {
            let x = val(a).data();
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                if x[k] > 0.0 {
                    da[k] += g[k];
                }
            }
        }
        &Op::Square(a) => {
            let x = val(a).data();
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += 2.0 * g[k] * x[k];
            }
        }
        &Op::Sqrt(a) => {
            let y = out.data();
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                da[k] += 0.5 * g[k] / y[k];
            }
        }
        &Op::Sum(a) => {
            let n = val(a).len();
            let da = acc(grads, a, n);
            da.iter_mut().for_each(|d| *d += g[0]);
        }
        &Op::SumRows(a) => {
            let n = out.cols();
            let len = val(a).len();
            let da = acc(grads, a, len);
            for k in 0..len {
                da[k] += g[k % n];
            }
        }
        &Op::SumCols(a) => {
            let n = val(a).cols();
            let len = val(a).len();
            let da = acc(grads, a, len);
            for k in 0..len {
                da[k] += g[k / n];
            }
        }
        &Op::Transpose(a) => {
            let (m, n) = (val(a).rows(), val(a).cols());
            let da = acc(grads, a, m * n);
            for r in 0..m {
                for c in 0..n {
                    da[r * n + c] += g[c * m + r];
                }
            }
        }
        &Op::Reshape(a) => add_into(acc(grads, a, g.len()), g, 1.0),
        Op::ConcatCols(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                let dp = acc(grads, p, rows * w);
                for r in 0..rows {
                    add_into(
                        &mut dp[r * w..(r + 1) * w],
                        &g[r * total + offset..r * total + offset + w],
                        1.0,
                    );
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                add_into(acc(grads, p, len), &g[offset..offset + len], 1.0);
                offset += len;
            }
        }
        &Op::SliceCols(a, start) => {
            let (m, n) = (val(a).rows(), val(a).cols());
            let w = out.cols();
            let da = acc(grads, a, m * n);
            for r in 0..m {
                add_into(&mut da[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w], 1.0);
            }
        }
        Op::Gather(a, idx) => {
            let n = out.cols();
            let len = val(*a).len();
            let da = acc(grads, *a, len);
            for (r, &src) in idx.iter().enumerate() {
                add_into(&mut da[src * n..(src + 1) * n], &g[r * n..(r + 1) * n], 1.0);
            }
        }
        &Op::Softmax(a) => {
            let n = out.cols();
            let y = out.data();
            let da = acc(grads, a, y.len());
            for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for c in 0..n {
                    da[r * n + c] += yr[c] * (gr[c] - dot);
                }
            }
        }
        Op::LayerNorm(a, inv_std) => {
            let n = out.cols();
            let y = out.data();
            let da = acc(grads, *a, y.len());
            for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                let mean_g = gr.iter().sum::<f64>() / n as f64;
                let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                for c in 0..n {
                    da[r * n + c] += inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                }
            }
        }
        &Op::Clamp(a, lo, hi) => {
            let x = val(a).data();
            let da = acc(grads, a, g.len());
            for k in 0..g.len() {
                if x[k] >= lo && x[k] <= hi {
                    da[k] += g[k];
                }
            }
        }
        &Op::Minimum(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            for k in 0..g.len() {
                if av[k] <= bv[k] {
                    ga[k] = g[k];
                } else {
                    gb[k] = g[k];
                }
            }
            add_into(acc(grads, a, g.len()), &ga, 1.0);
            add_into(acc(grads, b, g.len()), &gb, 1.0);
        }
        &Op::ClipNormRows(a, max) => {
            let n = out.cols();
            let x = val(a).data();
            let da = acc(grads, a, x.len());
            for (r, (xr, gr)) in x.chunks(n).zip(g.chunks(n)).enumerate() {
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > max {
                    let xg: f64 = xr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    let s = max / norm;
                    for c in 0..n {
                        da[r * n + c] += s * (gr[c] - xr[c] * xg / (norm * norm));
                    }
                } else {
                    add_into(&mut da[r * n..(r + 1) * n], gr, 1.0);
                }
            }
        }
        &Op::PairMean(a, b, agents, steps) => {
            let d = out.cols();
            let (av, bv) = (val(a).data(), val(b).data());
            let inv = 1.0 / steps as f64;
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for i in 0..agents {
                for j in 0..agents {
                    let gij = &g[(i * agents + j) * d..(i * agents + j + 1) * d];
                    for t in 0..steps {
                        let ra = (i * steps + t) * d;
                        let rb = (j * steps + t) * d;
                        for c in 0..d {
                            ga[ra + c] += inv * gij[c] * bv[rb + c];
                            gb[rb + c] += inv * gij[c] * av[ra + c];
                        }
                    }
                }
            }
            add_into(acc(grads, a, ga.len()), &ga, 1.0);
            add_into(acc(grads, b, gb.len()), &gb, 1.0);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Adjoints from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Adjoint of `var`, zero if it did not influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match &self.grads[var.id] {
            Some(g) => Tensor::from_raw(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Adds parameter adjoints into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                add_into(store.grad_mut(pid), g, 1.0);
            }
        }
    }
}

macro_rules! unary {
    ($name:ident, $op:ident, $f:expr) => {
        pub fn $name(self) -> Var<'t> {
            let f: fn(f64) -> f64 = $f;
            let v = self.map(f);
            self.tape.push(v, Op::$op(self.id))
        }
    };
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims(&self) -> (usize, usize) {
        let nodes = self.tape.nodes.borrow();
        let t = &nodes[self.id].value;
        (t.rows(), t.cols())
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let t = &nodes[self.id].value;
        Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    fn zip(&self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        assert!(
            a.rows() == b.rows() && a.cols() == b.cols(),
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        Tensor::from_raw(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    /// `self[m×k] · rhs[k×n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        assert_eq!(k, b.rows(), "matmul: {:?} · {:?}", a.shape(), b.shape());
        let mut c = vec![0.0; m * n];
        gemm_acc(m, k, n, a.data(), b.data(), &mut c);
        drop(nodes);
        self.tape
            .push(Tensor::from_raw(vec![m, n], c), Op::MatMul(self.id, rhs.id))
    }

    /// `self[m×k] · rhs[n×k]ᵀ`.
    pub fn matmul_bt(self, rhs: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        assert_eq!(k, b.cols(), "matmul_bt: {:?} · {:?}ᵀ", a.shape(), b.shape());
        let mut c = vec![0.0; m * n];
        gemm_bt_acc(m, k, n, a.data(), b.data(), &mut c);
        drop(nodes);
        self.tape
            .push(Tensor::from_raw(vec![m, n], c), Op::MatMulBt(self.id, rhs.id))
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip(rhs, "div", |a, b| a / b);
        self.tape.push(v, Op::Div(self.id, rhs.id))
    }

    /// Elementwise minimum.
    pub fn minimum(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip(rhs, "minimum", f64::min);
        self.tape.push(v, Op::Minimum(self.id, rhs.id))
    }

    /// Adds a length-`n` row to every row of `self[m×n]`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[row.id].value);
        let n = a.cols();
        assert_eq!(b.len(), n, "add_row: {:?} + {:?}", a.shape(), b.shape());
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| x + b.data()[k % n])
            .collect();
        let shape = a.shape().to_vec();
        drop(nodes);
        self.tape
            .push(Tensor::from_raw(shape, data), Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row of `self[m×n]` elementwise by a length-`n` row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[row.id].value);
        let n = a.cols();
        assert_eq!(b.len(), n, "mul_row: {:?} * {:?}", a.shape(), b.shape());
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| x * b.data()[k % n])
            .collect();
        let shape = a.shape().to_vec();
        drop(nodes);
        self.tape
            .push(Tensor::from_raw(shape, data), Op::MulRow(self.id, row.id))
    }

    /// Scales row `i` of `self[m×n]` by `col[i]`.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[col.id].value);
        let (m, n) = (a.rows(), a.cols());
        assert_eq!(b.len(), m, "mul_col: {:?} * {:?}", a.shape(), b.shape());
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| x * b.data()[k / n])
            .collect();
        let shape = a.shape().to_vec();
        drop(nodes);
        self.tape
            .push(Tensor::from_raw(shape, data), Op::MulCol(self.id, col.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.map(|x| c * x);
        self.tape.push(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.map(|x| x + c);
        self.tape.push(v, Op::AddScalar(self.id))
    }

    unary!(tanh, Tanh, f64::tanh);
    unary!(softplus, Softplus, softplus);
    unary!(sigmoid, Sigmoid, sigmoid);
    unary!(exp, Exp, f64::exp);
    unary!(ln, Ln, f64::ln);
    unary!(relu, Relu, |x| x.max(0.0));
    unary!(square, Square, |x| x * x);
    unary!(sqrt, Sqrt, f64::sqrt);

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.map(|x| x.clamp(lo, hi));
        self.tape.push(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.tape.nodes.borrow()[self.id].value.data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.nodes.borrow()[self.id].value.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums: `[m×n] → [1×n]`.
    pub fn sum_rows(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let n = a.cols();
        let mut s = vec![0.0; n];
        for row in a.data().chunks(n) {
            add_into(&mut s, row, 1.0);
        }
        drop(nodes);
        self.tape.push(Tensor::from_raw(vec![1, n], s), Op::SumRows(self.id))
    }

    /// Row sums: `[m×n] → [m×1]`.
    pub fn sum_cols(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let n = a.cols();
        let s: Vec<f64> = a.data().chunks(n).map(|r| r.iter().sum()).collect();
        let m = s.len();
        drop(nodes);
        self.tape.push(Tensor::from_raw(vec![m, 1], s), Op::SumCols(self.id))
    }

    pub fn transpose(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let (m, n) = (a.rows(), a.cols());
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = a.data()[r * n + c];
            }
        }
        drop(nodes);
        self.tape
            .push(Tensor::from_raw(vec![n, m], data), Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let t = self.value().reshape(shape.to_vec()).expect("reshape: element count");
        self.tape.push(t, Op::Reshape(self.id))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let (m, n) = (a.rows(), a.cols());
        assert!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&a.data()[r * n + start..r * n + end]);
        }
        drop(nodes);
        self.tape
            .push(Tensor::from_raw(vec![m, w], data), Op::SliceCols(self.id, start))
    }

    /// Output row `r` is input row `index[r]`; indices may repeat.
    pub fn gather_rows(self, index: Rc<Vec<usize>>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let n = a.cols();
        let mut data = Vec::with_capacity(index.len() * n);
        for &src in index.iter() {
            assert!(src < a.rows(), "gather_rows index {src} out of {}", a.rows());
            data.extend_from_slice(a.row(src));
        }
        drop(nodes);
        let rows = index.len();
        self.tape
            .push(Tensor::from_raw(vec![rows, n], data), Op::Gather(self.id, index))
    }

    /// Row-wise softmax. Masked entries (`false`) get probability zero.
    /// Panics if a row is fully masked; callers validate masks first.
    pub fn softmax_rows(self, mask: Option<&[bool]>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let n = a.cols();
        let mut data = a.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let keep = |c: usize| mask.map_or(true, |m| m[r * n + c]);
            let max = (0..n)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "softmax row {r} fully masked");
            let mut z = 0.0;
            for c in 0..n {
                if keep(c) {
                    row[c] = (row[c] - max).exp();
                    z += row[c];
                } else {
                    row[c] = 0.0;
                }
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = a.shape().to_vec();
        drop(nodes);
        self.tape
            .push(Tensor::from_raw(shape, data), Op::Softmax(self.id))
    }

    /// Row-wise standardization to zero mean and unit variance.
    pub fn layer_norm_rows(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let n = a.cols();
        let mut data = a.data().to_vec();
        let mut inv_std = Vec::with_capacity(a.rows());
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let shape = a.shape().to_vec();
        drop(nodes);
        self.tape
            .push(Tensor::from_raw(shape, data), Op::LayerNorm(self.id, inv_std))
    }

    /// Rescales each row whose Euclidean norm exceeds `max` onto the
    /// radius-`max` sphere.
    pub fn clip_norm_rows(self, max: f64) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let n = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > max {
                row.iter_mut().for_each(|v| *v *= max / norm);
            }
        }
        let shape = a.shape().to_vec();
        drop(nodes);
        self.tape
            .push(Tensor::from_raw(shape, data), Op::ClipNormRows(self.id, max))
    }

    /// Pairwise temporal mean of elementwise products.
    ///
    /// `self` and `other` are `[agents·steps × d]` with row `i·steps + t`
    /// holding agent `i` at step `t`. Output row `i·agents + j` is
    /// `mean_t self[i,t] ⊙ other[j,t]`.
    pub fn pair_mean(self, other: Var<'t>, agents: usize, steps: usize) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        let d = a.cols();
        assert_eq!(a.rows(), agents * steps, "pair_mean rows");
        assert_eq!((b.rows(), b.cols()), (agents * steps, d), "pair_mean operand");
        let inv = 1.0 / steps as f64;
        let mut data = vec![0.0; agents * agents * d];
        for i in 0..agents {
            for j in 0..agents {
                let o = &mut data[(i * agents + j) * d..(i * agents + j + 1) * d];
                for t in 0..steps {
                    let ra = a.row(i * steps + t);
                    let rb = b.row(j * steps + t);
                    for c in 0..d {
                        o[c] += inv * ra[c] * rb[c];
                    }
                }
            }
        }
        drop(nodes);
        self.tape.push(
            Tensor::from_raw(vec![agents * agents, d], data),
            Op::PairMean(self.id, other.id, agents, steps),
        )
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip(rhs, "add", |a, b| a + b);
        self.tape.push(v, Op::Add(self.id, rhs.id))
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip(rhs, "sub", |a, b| a - b);
        self.tape.push(v, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip(rhs, "mul", |a, b| a * b);
        self.tape.push(v, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
