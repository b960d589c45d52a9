//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] returns the
//! gradient of a scalar (1×1) node with respect to every node that depends on
//! a trainable parameter.

use std::collections::HashMap;

use super::{softmax_rows, Matrix, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Tanh(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    NegLogPick {
        x: Var,
        index: usize,
        clamped: bool,
    },
    Mean(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    /// Treat every parameter as differentiable (used for saliency maps).
    grad_all_params: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_all_params: false,
        }
    }

    pub fn with_all_param_grads() -> Self {
        Self {
            grad_all_params: true,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a parameter; created once per tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = self.grad_all_params || store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, rg);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.clone();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scaled(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (1×n each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), cols, "layer_norm gamma width mismatch");
        let n = T::of(cols as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.tanh());
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let value = Matrix::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let cols = av.cols();
        let value = Matrix::from_vec(
            len,
            cols,
            av.data()[start * cols..(start + len) * cols].to_vec(),
        );
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// `-ln(max(x[0, index], 1e-12))` for a 1×n probability row.
    pub fn neg_log_pick(&mut self, x: Var, index: usize) -> Var {
        let p = self.value(x).get(0, index);
        let clamp = T::of(LOG_CLAMP);
        let clamped = p < clamp;
        let value = Matrix::filled(1, 1, -(p.max(clamp)).ln());
        let rg = self.rg(x);
        self.push(value, Op::NegLogPick { x, index, clamped }, rg)
    }

    /// Mean of 1×1 nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean of nothing");
        let n = T::of(parts.len() as f64);
        let s: T = parts.iter().map(|&p| self.scalar(p)).sum();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::filled(1, 1, s / n), Op::Mean(parts.to_vec()), rg)
    }

    /// Gradients of the scalar `loss` with respect to every differentiable node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, d: Matrix<T>, grads: &mut Vec<Option<Matrix<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.matmul_bt(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).t_matmul(&g), &mut grads);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.matmul(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, g.t_matmul(self.value(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.clone(), &mut grads);
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut s = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in s.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(*row, s, &mut grads);
                    }
                    acc(*a, g.clone(), &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g.scaled(*s), &mut grads),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                        for c in 0..y.cols() {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gv = self.value(*gamma);
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut dg = Matrix::zeros(1, cols);
                        let mut db = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                let gy = g.get(r, c);
                                dg.data_mut()[c] += gy * xhat.get(r, c);
                                db.data_mut()[c] += gy;
                            }
                        }
                        acc(*gamma, dg, &mut grads);
                        acc(*beta, db, &mut grads);
                    }
                    if self.rg(*x) {
                        let n = T::of(cols as f64);
                        let mut dx = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            let dh: Vec<T> =
                                (0..cols).map(|c| g.get(r, c) * gv.get(0, c)).collect();
                            let sum_dh: T = dh.iter().copied().sum();
                            let sum_dh_h: T = (0..cols).map(|c| dh[c] * xhat.get(r, c)).sum();
                            let k = inv_std[r] / n;
                            for c in 0..cols {
                                dx.set(r, c, k * (n * dh[c] - sum_dh - xhat.get(r, c) * sum_dh_h));
                            }
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for (dv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                        *dv *= T::one() - yv * yv;
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    let cols = src.cols();
                    d.data_mut()[start * cols..start * cols + g.data().len()]
                        .copy_from_slice(g.data());
                    acc(*a, d, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                            acc(p, d, &mut grads);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.rg(p) {
                            let d = Matrix::from_vec(
                                rows,
                                cols,
                                g.data()[off * cols..(off + rows) * cols].to_vec(),
                            );
                            acc(p, d, &mut grads);
                        }
                        off += rows;
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, g.clone().reshape(r, c), &mut grads);
                }
                Op::NegLogPick { x, index, clamped } => {
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(1, xv.cols());
                    if !clamped {
                        d.set(0, *index, -g.get(0, 0) / xv.get(0, *index));
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Mean(parts) => {
                    let share = g.get(0, 0) / T::of(parts.len() as f64);
                    for &p in parts {
                        acc(p, Matrix::filled(1, 1, share), &mut grads);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
                .collect(),
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Matrix<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of an intermediate node; `None` if it does not influence the loss.
    pub fn of(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes[v.0].as_ref()
    }

    /// Gradients for parameters that require them.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, v)| self.of(v).map(|g| (p, g)))
    }
}
