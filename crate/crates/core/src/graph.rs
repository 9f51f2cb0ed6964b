//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough saved state to run its adjoint. Parameters enter as borrowed leaves
//! tagged with their [`ParamId`]; [`Graph::backward`] returns the gradient of a
//! scalar node with respect to every parameter leaf that reached it.

use std::borrow::Cow;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, GemmOperand, Matrix};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a [n, c] + b [1, c]`, broadcasting `b` over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Parameter used as a constant: gradients are not tracked.
    pub fn frozen(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.constant_ref(store.get(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::MatMul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a single-row operand");
        assert_eq!(av.cols(), bv.cols(), "add_row column mismatch");
        let bias = bv.row(0);
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::AddRow(a, b), ng)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, silu, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of shape `[1, C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for j in 0..c {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(r);
            for j in 0..c {
                o[j] = xhat.get(r, j) * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        assert!(
            parts.iter().all(|&p| self.shape(p).0 == rows),
            "concat row mismatch"
        );
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Cow::Owned(out), Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "slice out of range");
        let out = Matrix::from_fn(av.rows(), end - start, |r, c| av.get(r, start + c));
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::SliceCols(a, start), ng)
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(index.len(), av.cols());
        for (i, &src) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(src));
        }
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Gather(a, index), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(rows, cols)
            .expect("reshape element count");
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Reshape(a), ng)
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// consecutive blocks of `group` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, group: usize, heads: usize) -> Var {
        let (n, d) = self.shape(q);
        assert_eq!(self.shape(k), (n, d));
        assert_eq!(self.shape(v), (n, d));
        assert!(group > 0 && n % group == 0, "rows not divisible by group");
        assert!(heads > 0 && d % heads == 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = n / group;
        let s = group;
        let (qv, kv, vv) = (
            self.value(q).as_slice(),
            self.value(k).as_slice(),
            self.value(v).as_slice(),
        );
        let mut out = Matrix::zeros(n, d);
        let mut probs = vec![0.0; groups * heads * s * s];
        let os = out.as_mut_slice();
        for g in 0..groups {
            for h in 0..heads {
                let base = g * s * d + h * dh;
                let at = |i: usize| base + i * d..base + i * d + dh;
                let p = &mut probs[(g * heads + h) * s * s..(g * heads + h + 1) * s * s];
                for (i, row) in p.chunks_mut(s).enumerate() {
                    let qi = &qv[at(i)];
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = dot(qi, &kv[at(j)]) * scale;
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= z;
                    }
                    for (j, &pij) in row.iter().enumerate() {
                        axpy(pij, &vv[at(j)], &mut os[at(i)]);
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum_squares());
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::SumSquares(a), ng)
    }

    /// Mean softmax cross-entropy of `logits [n, classes]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "one label per row");
        let probs = softmax_rows(lv);
        let n = labels.len() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -probs.get(r, y).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n;
        let ng = self.ng(logits);
        self.push(
            Cow::Owned(Matrix::filled(1, 1, loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Gradient of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var, n_params: usize) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads = Grads::new(n_params);
        let mut adj: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(id) = node.param {
                grads.accumulate(id, &g);
                continue;
            }
            self.propagate(node, g, &mut adj);
        }
        grads
    }

    fn send(&self, adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<'a>, g: Matrix, adj: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(
                        GemmOperand::new(g.as_slice(), g.rows(), g.cols(), false),
                        GemmOperand::new(bv.as_slice(), bv.rows(), bv.cols(), true),
                        da.as_mut_slice(),
                        1.0,
                        0.0,
                    );
                    self.send(adj, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(
                        GemmOperand::new(av.as_slice(), av.rows(), av.cols(), true),
                        GemmOperand::new(g.as_slice(), g.rows(), g.cols(), false),
                        db.as_mut_slice(),
                        1.0,
                        0.0,
                    );
                    self.send(adj, *b, db);
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    self.send(adj, *b, db);
                }
                self.send(adj, *a, g);
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.send(adj, *b, g.clone());
                }
                self.send(adj, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.send(adj, *b, g.map(|x| -x));
                }
                self.send(adj, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.send(adj, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.send(adj, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.send(adj, *a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.send(adj, *a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (1.0 + x * (1.0 - s))
                });
                self.send(adj, *a, d);
            }
            Op::Gelu(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| gi * gelu_grad(x));
                self.send(adj, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y));
                self.send(adj, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y));
                self.send(adj, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = g.shape();
                let gam = self.value(*gamma).row(0);
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Matrix::zeros(1, c);
                    let mut db = Matrix::zeros(1, c);
                    for r in 0..n {
                        for j in 0..c {
                            dg.as_mut_slice()[j] += g.get(r, j) * xhat.get(r, j);
                            db.as_mut_slice()[j] += g.get(r, j);
                        }
                    }
                    self.send(adj, *gamma, dg);
                    self.send(adj, *beta, db);
                }
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(n, c);
                    let cf = c as f64;
                    for r in 0..n {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let dxh = g.get(r, j) * gam[j];
                            sum_d += dxh;
                            sum_dx += dxh * xhat.get(r, j);
                        }
                        let is = inv_std[r];
                        for j in 0..c {
                            let dxh = g.get(r, j) * gam[j];
                            dx.set(
                                r,
                                j,
                                is / cf * (cf * dxh - sum_d - xhat.get(r, j) * sum_dx),
                            );
                        }
                    }
                    self.send(adj, *x, dx);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        self.send(adj, p, d);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.send(adj, *a, d);
            }
            Op::Gather(a, index) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for (i, &src) in index.iter().enumerate() {
                    for (o, x) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                self.send(adj, *a, d);
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                self.send(adj, *a, g.reshape(rows, cols).expect("reshape back"));
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            } => self.attention_backward(g, (*q, *k, *v), *group, *heads, probs, adj),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.send(adj, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.get(0, 0);
                self.send(adj, *a, self.value(*a).map(|x| s * x));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len() as f64;
                let s = g.get(0, 0) / n;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let cur = d.get(r, y);
                    d.set(r, y, cur - 1.0);
                }
                d.scale_assign(s);
                self.send(adj, *logits, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: Matrix,
        (q, k, v): (Var, Var, Var),
        group: usize,
        heads: usize,
        probs: &[f64],
        adj: &mut [Option<Matrix>],
    ) {
        let (n, d) = g.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let s = group;
        let (qv, kv, vv) = (
            self.value(q).as_slice(),
            self.value(k).as_slice(),
            self.value(v).as_slice(),
        );
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut dp = vec![0.0; s * s];
        let gs = g.as_slice();
        let (dqs, dks, dvs) = (dq.as_mut_slice(), dk.as_mut_slice(), dv.as_mut_slice());
        for grp in 0..n / s {
            for h in 0..heads {
                let base = grp * s * d + h * dh;
                let at = |i: usize| base + i * d..base + i * d + dh;
                let p = &probs[(grp * heads + h) * s * s..(grp * heads + h + 1) * s * s];
                // dP = dO V^T and dV = P^T dO
                for i in 0..s {
                    let gi = &gs[at(i)];
                    for j in 0..s {
                        dp[i * s + j] = dot(gi, &vv[at(j)]);
                        axpy(p[i * s + j], gi, &mut dvs[at(j)]);
                    }
                }
                // softmax adjoint, folded with the 1/sqrt(dh) score scale
                for r in 0..s {
                    let pr = &p[r * s..(r + 1) * s];
                    let dr = &mut dp[r * s..(r + 1) * s];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (x, &pi) in dr.iter_mut().zip(pr) {
                        *x = pi * (*x - dot) * scale;
                    }
                }
                // dQ = dS K and dK = dS^T Q
                for i in 0..s {
                    for j in 0..s {
                        let ds = dp[i * s + j];
                        axpy(ds, &kv[at(j)], &mut dqs[at(i)]);
                        axpy(ds, &qv[at(i)], &mut dks[at(j)]);
                    }
                }
            }
        }
        self.send(adj, q, dq);
        self.send(adj, k, dk);
        self.send(adj, v, dv);
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::params::normal_init;

    /// Central differences of `f` with respect to every entry of every
    /// parameter, compared with the tape gradient.
    fn check(store: &ParamStore, f: impl for<'s> Fn(&mut Graph<'s>, &'s ParamStore) -> Var) {
        let analytic = {
            let mut g = Graph::new();
            let loss = f(&mut g, store);
            g.backward(loss, store.len())
        };
        let h = 1e-6;
        for id in store.ids() {
            let n = store.get(id).len();
            let mut num = vec![0.0; n];
            for (i, slot) in num.iter_mut().enumerate() {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.get_mut(id).as_mut_slice()[i] += delta;
                    let mut g = Graph::new();
                    let l = f(&mut g, &s);
                    g.value(l).get(0, 0)
                };
                *slot = (eval(h) - eval(-h)) / (2.0 * h);
            }
            let a = analytic
                .get(id)
                .map(|m| m.as_slice().to_vec())
                .unwrap_or_else(|| vec![0.0; n]);
            let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(
                num.iter().map(|x| x * x).sum::<f64>().sqrt(),
            );
            assert!(
                diff <= 1e-6 * scale.max(1e-8),
                "{}: rel err {}",
                store.name(id),
                diff / scale
            );
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.insert(n, normal_init(r, c, 0.7, &mut rng));
        }
        s
    }

    #[test]
    fn elementwise_and_linear_grads() {
        let s = store_with(&[("x", 4, 3), ("w", 3, 5), ("b", 1, 5), ("y", 4, 5)]);
        check(&s, |g, s| {
            let x = g.param(s, ParamId(0));
            let w = g.param(s, ParamId(1));
            let b = g.param(s, ParamId(2));
            let y = g.param(s, ParamId(3));
            let h = g.linear(x, w, b);
            let a = g.silu(h);
            let t = g.tanh(y);
            let m = g.mul(a, t);
            let sg = g.sigmoid(m);
            let ge = g.gelu(sg);
            let d = g.sub(ge, y);
            let e = g.scale(d, 0.3);
            g.sum_squares(e)
        });
    }

    #[test]
    fn layer_norm_and_shape_ops_grads() {
        let s = store_with(&[("x", 6, 4), ("g", 1, 4), ("b", 1, 4), ("z", 6, 2)]);
        check(&s, |g, s| {
            let x = g.param(s, ParamId(0));
            let ga = g.param(s, ParamId(1));
            let be = g.param(s, ParamId(2));
            let z = g.param(s, ParamId(3));
            let n = g.layer_norm(x, ga, be);
            let c = g.concat(&[n, z]);
            let sl = g.slice_cols(c, 1, 5);
            let p = g.gather_rows(sl, vec![5, 0, 0, 3, 2]);
            let r = g.reshape(p, 4, 5);
            let q = g.relu(r);
            let w = g.add(q, r);
            g.sum_squares(w)
        });
    }

    #[test]
    fn attention_grads() {
        let s = store_with(&[("q", 6, 4), ("k", 6, 4), ("v", 6, 4), ("t", 6, 4)]);
        check(&s, |g, s| {
            let q = g.param(s, ParamId(0));
            let k = g.param(s, ParamId(1));
            let v = g.param(s, ParamId(2));
            let t = g.param(s, ParamId(3));
            let a = g.attention(q, k, v, 3, 2);
            let m = g.mul(a, t);
            g.sum_squares(m)
        });
    }

    #[test]
    fn cross_entropy_grads() {
        let s = store_with(&[("logits", 3, 4)]);
        check(&s, |g, s| {
            let l = g.param(s, ParamId(0));
            let t = g.tanh(l);
            g.cross_entropy(t, &[0, 3, 1])
        });
    }

    #[test]
    fn attention_rows_sum_to_value_average() {
        // With identical keys the attention weights are uniform.
        let mut g = Graph::new();
        let q = g.constant(Matrix::from_fn(4, 2, |r, c| (r + c) as f64));
        let k = g.constant(Matrix::filled(4, 2, 1.0));
        let v = g.constant(Matrix::from_fn(4, 2, |r, _| r as f64));
        let a = g.attention(q, k, v, 4, 1);
        for r in 0..4 {
            assert!((g.value(a).get(r, 0) - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let s = store_with(&[("w", 2, 2)]);
        let mut g = Graph::new();
        let w = g.frozen(&s, ParamId(0));
        let l = g.sum_squares(w);
        let grads = g.backward(l, s.len());
        assert!(grads.get(ParamId(0)).is_none());
    }
}
