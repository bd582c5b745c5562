//! Reverse-mode gradient tape.
//!
//! A [`Tape`] is an append-only list of nodes. Each operation evaluates
//! eagerly and, when the tape is recording and some input requires a
//! gradient, remembers enough to propagate the adjoint back to its inputs.
//! Nodes created with [`Tape::constant`] or [`Tape::detach`] never receive
//! gradient, which is how stop-gradient is expressed.

use crate::error::{Result, TensorError};
use crate::kernels::{self, gemm};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    BroadcastRows(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Silu(usize),
    Log(usize),
    Exp(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    SquaredNorm(usize),
    L1Norm(usize),
    ConcatCols(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates but never records; `backward` fails on it.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: self.recording && requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        let out = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, op, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `a + b` with `b: [m]` broadcast over the rows of `a: [n, m]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.numel() != av.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        kernels::add_row_inplace(out.data_mut(), bv.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a.0, b.0), rg))
    }

    /// Repeats a vector `[m]` into `[rows, m]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() > 1 {
            return Err(TensorError::Invalid(format!(
                "broadcast_rows expects a vector, got {:?}",
                av.shape()
            )));
        }
        let m = av.numel();
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(av.data());
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(rows, m, data)?, Op::BroadcastRows(a.0), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let out = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(out, node, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::relu, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::silu, Op::Silu(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a.0))
    }

    fn reduce(&mut self, a: Var, value: f64, node: Op) -> Var {
        let rg = self.rg(a);
        self.push(Tensor::scalar(value), node, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.reduce(a, s, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.reduce(a, s, Op::Mean(a.0))
    }

    /// Sum of squares over every element.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().map(|x| x * x).sum();
        self.reduce(a, s, Op::SquaredNorm(a.0))
    }

    /// Sum of absolute values over every element.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().map(|x| x.abs()).sum();
        self.reduce(a, s, Op::L1Norm(a.0))
    }

    /// `[n,p] ‖ [n,q] -> [n,p+q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.rows() != bv.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (n, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::matrix(n, p + q, data)?,
            Op::ConcatCols(a.0, b.0),
            rg,
        ))
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    ///
    /// Gradients from earlier `backward` calls on the same tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(TensorError::NotRecorded);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    /// Like [`Tape::grad`] but zero-filled when nothing flowed.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let needs = |j: usize| nodes[j].requires_grad;
        match nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(a) {
                    // dA[m,k] += G[m,n] · Bᵀ[n,k]
                    let da = slot(grads, a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        (g, n as isize, 1),
                        (bv.data(), 1, n as isize),
                        1.0,
                        da,
                    );
                }
                if needs(b) {
                    // dB[k,n] += Aᵀ[k,m] · G[m,n]
                    let db = slot(grads, b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        (av.data(), 1, k as isize),
                        (g, n as isize, 1),
                        1.0,
                        db,
                    );
                }
            }
            Op::Add(a, b) => {
                for (j, s) in [(a, 1.0), (b, 1.0)] {
                    if needs(j) {
                        axpy(slot(grads, j, g.len()), s, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (j, s) in [(a, 1.0), (b, -1.0)] {
                    if needs(j) {
                        axpy(slot(grads, j, g.len()), s, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let other = nodes[b].value.data();
                    let da = slot(grads, a, g.len());
                    for ((d, gi), o) in da.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if needs(b) {
                    let other = nodes[a].value.data();
                    let db = slot(grads, b, g.len());
                    for ((d, gi), o) in db.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if needs(a) {
                    axpy(slot(grads, a, g.len()), 1.0, g);
                }
                if needs(b) {
                    let c = nodes[b].value.numel();
                    col_sum_into(slot(grads, b, c), g);
                }
            }
            Op::BroadcastRows(a) => {
                let c = nodes[a].value.numel();
                col_sum_into(slot(grads, a, c), g);
            }
            Op::Scale(a, c) => axpy(slot(grads, a, g.len()), c, g),
            Op::AddScalar(a) => axpy(slot(grads, a, g.len()), 1.0, g),
            Op::Tanh(a) => {
                elementwise(grads, a, g, out.data(), |_, y| 1.0 - y * y, &nodes[a].value)
            }
            Op::Relu(a) => elementwise(
                grads,
                a,
                g,
                out.data(),
                |x, _| if x > 0.0 { 1.0 } else { 0.0 },
                &nodes[a].value,
            ),
            Op::Sigmoid(a) => elementwise(
                grads,
                a,
                g,
                out.data(),
                |_, y| y * (1.0 - y),
                &nodes[a].value,
            ),
            Op::Silu(a) => elementwise(
                grads,
                a,
                g,
                out.data(),
                |x, _| {
                    let s = kernels::sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                },
                &nodes[a].value,
            ),
            Op::Log(a) => elementwise(grads, a, g, out.data(), |x, _| 1.0 / x, &nodes[a].value),
            Op::Exp(a) => elementwise(grads, a, g, out.data(), |_, y| y, &nodes[a].value),
            Op::Softplus(a) => elementwise(
                grads,
                a,
                g,
                out.data(),
                |x, _| kernels::sigmoid(x),
                &nodes[a].value,
            ),
            Op::Sum(a) => {
                let da = slot(grads, a, nodes[a].value.numel());
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = nodes[a].value.numel();
                let s = g[0] / n as f64;
                slot(grads, a, n).iter_mut().for_each(|d| *d += s);
            }
            Op::SquaredNorm(a) => {
                let x = nodes[a].value.data();
                let da = slot(grads, a, x.len());
                for (d, xi) in da.iter_mut().zip(x) {
                    *d += 2.0 * xi * g[0];
                }
            }
            Op::L1Norm(a) => {
                let x = nodes[a].value.data();
                let da = slot(grads, a, x.len());
                for (d, xi) in da.iter_mut().zip(x) {
                    let s = if *xi > 0.0 {
                        1.0
                    } else if *xi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *d += s * g[0];
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (nodes[a].value.cols(), nodes[b].value.cols());
                let n = nodes[a].value.rows();
                if needs(a) {
                    let da = slot(grads, a, n * p);
                    for r in 0..n {
                        axpy(
                            &mut da[r * p..(r + 1) * p],
                            1.0,
                            &g[r * (p + q)..r * (p + q) + p],
                        );
                    }
                }
                if needs(b) {
                    let db = slot(grads, b, n * q);
                    for r in 0..n {
                        axpy(
                            &mut db[r * q..(r + 1) * q],
                            1.0,
                            &g[r * (p + q) + p..(r + 1) * (p + q)],
                        );
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> &mut Vec<f64> {
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], s: f64, src: &[f64]) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

fn col_sum_into(dst: &mut [f64], g: &[f64]) {
    let c = dst.len();
    for row in g.chunks_exact(c) {
        for (d, v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// `d input += g · f(input, output)` elementwise.
fn elementwise(
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    g: &[f64],
    out: &[f64],
    f: impl Fn(f64, f64) -> f64,
    input: &Tensor,
) {
    let x = input.data();
    let da = slot(grads, a, x.len());
    for i in 0..x.len() {
        da[i] += g[i] * f(x[i], out[i]);
    }
}
