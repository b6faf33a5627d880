//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! Values are appended to a [`Tape`] in execution order and referred to by
//! [`Var`] handles. An operation is recorded with its inputs only when at
//! least one input requires a gradient; otherwise the node is a plain
//! constant and backward skips it. [`Tape::backward`] consumes the tape and
//! replays adjoints in strict reverse order.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Transpose(Var),
    Sin(Var),
    Cos(Var),
    Gelu(Var),
    Square(Var),
    SoftmaxRows(Var),
    RmsNorm(Var, f64),
    SelectRow(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that will receive a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).add_scalar(k);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `a[m x n] + r[1 x n]`, broadcasting `r` over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let out = row_broadcast(self.value(a), self.value(r), "add_row", |x, y| x + y)?;
        let rg = self.rg(&[a, r]);
        Ok(self.push(out, Op::AddRow(a, r), rg))
    }

    /// `a[m x n] * r[1 x n]`, broadcasting `r` over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let out = row_broadcast(self.value(a), self.value(r), "mul_row", |x, y| x * y)?;
        let rg = self.rg(&[a, r]);
        Ok(self.push(out, Op::MulRow(a, r), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).sin();
        let rg = self.rg(&[a]);
        self.push(out, Op::Sin(a), rg)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).cos();
        let rg = self.rg(&[a]);
        self.push(out, Op::Cos(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).gelu();
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).square();
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let out = self.value(a).rms_norm(eps)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RmsNorm(a, eps), rg))
    }

    /// Row `index` of a matrix, as a `1 x n` matrix.
    pub fn select_row(&mut self, a: Var, index: usize) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.require_matrix("select_row")?;
        if index >= m {
            return Err(Error::invalid(format!("row {index} out of range for {m} rows")));
        }
        let out = Tensor::matrix(1, n, src.row(index).to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectRow(a, index), rg))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.require_matrix("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::invalid(format!("columns {start}..{} out of range for {n}", start + len)));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Replay adjoints from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(a));
                let n = self.value(b).cols();
                if self.requires_grad(a) {
                    let ga = tensor::matmul_nt_kernel(g, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, &ga);
                }
                if self.requires_grad(b) {
                    let gb = tensor::matmul_tn_kernel(self.value(a).data(), g, m, k, n);
                    self.accumulate(grads, b, &gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, a, g, None);
                self.accumulate_broadcast(grads, b, g, None);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, a, g, None);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate_broadcast(grads, b, &neg, None);
            }
            Op::Mul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                self.accumulate_broadcast(grads, a, g, Some(bv));
                self.accumulate_broadcast(grads, b, g, Some(av));
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|x| x * k).collect();
                self.accumulate(grads, a, &ga);
            }
            Op::AddScalar(a) => self.accumulate(grads, a, g),
            Op::AddRow(a, r) => {
                self.accumulate(grads, a, g);
                if self.requires_grad(r) {
                    let n = self.value(r).len();
                    let mut gr = vec![0.0; n];
                    for row in g.chunks(n) {
                        gr.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    self.accumulate(grads, r, &gr);
                }
            }
            Op::MulRow(a, r) => {
                let rv = self.value(r).data();
                let n = rv.len();
                if self.requires_grad(a) {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * rv[i % n]).collect();
                    self.accumulate(grads, a, &ga);
                }
                if self.requires_grad(r) {
                    let av = self.value(a).data();
                    let mut gr = vec![0.0; n];
                    for (i, x) in g.iter().enumerate() {
                        gr[i % n] += x * av[i];
                    }
                    self.accumulate(grads, r, &gr);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims(self.value(a));
                // g is n x m
                let ga = tensor::transpose_kernel(g, n, m);
                self.accumulate(grads, a, &ga);
            }
            Op::Sin(a) => {
                let x = self.value(a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| g * x.cos()).collect();
                self.accumulate(grads, a, &ga);
            }
            Op::Cos(a) => {
                let x = self.value(a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| -g * x.sin()).collect();
                self.accumulate(grads, a, &ga);
            }
            Op::Gelu(a) => {
                let x = self.value(a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| g * tensor::gelu_grad(x))
                    .collect();
                self.accumulate(grads, a, &ga);
            }
            Op::Square(a) => {
                let x = self.value(a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, a, &ga);
            }
            Op::SoftmaxRows(a) => {
                let n = self.value(a).cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                self.accumulate(grads, a, &ga);
            }
            Op::RmsNorm(a, eps) => {
                let x = self.value(a).data();
                let n = self.value(a).cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, xr), out) in g.chunks(n).zip(x.chunks(n)).zip(ga.chunks_mut(n)) {
                    let inv = tensor::rms_inv(xr, eps);
                    let dot: f64 = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                    let coef = inv * inv * inv * dot / n as f64;
                    for ((o, g), x) in out.iter_mut().zip(gr).zip(xr) {
                        *o = inv * g - coef * x;
                    }
                }
                self.accumulate(grads, a, &ga);
            }
            Op::SelectRow(a, index) => {
                let src = self.value(a);
                let n = src.cols();
                let mut ga = vec![0.0; src.len()];
                ga[index * n..(index + 1) * n].copy_from_slice(g);
                self.accumulate(grads, a, &ga);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(a);
                let n = src.cols();
                let len = node.value.cols();
                let mut ga = vec![0.0; src.len()];
                for (i, gr) in g.chunks(len).enumerate() {
                    ga[i * n + start..i * n + start + len].copy_from_slice(gr);
                }
                self.accumulate(grads, a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(a).len()];
                self.accumulate(grads, a, &ga);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Accumulate `g` (optionally multiplied by `factor`) into `v`, reducing
    /// to a single value when `v` was scalar-broadcast.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        factor: Option<&Tensor>,
    ) {
        if !self.requires_grad(v) {
            return;
        }
        let scaled: Vec<f64> = match factor {
            Some(f) if f.len() == g.len() => g.iter().zip(f.data()).map(|(a, b)| a * b).collect(),
            Some(f) => g.iter().map(|a| a * f.item()).collect(),
            None => g.to_vec(),
        };
        if self.value(v).len() == scaled.len() {
            self.accumulate(grads, v, &scaled);
        } else {
            self.accumulate(grads, v, &[scaled.iter().sum()]);
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn row_broadcast(a: &Tensor, r: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (m, n) = a.require_matrix(op)?;
    if r.shape() != [1, n] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: r.shape().to_vec(),
        });
    }
    let rv = r.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, rv[i % n]))
        .collect();
    Tensor::matrix(m, n, data)
}
