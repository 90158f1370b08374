//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Every operation appends a node holding its forward value. Node indices are
//! a topological order, so [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, xhat: Tensor, rstd: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    Sum(Var),
    Bce { p: Var, target: Tensor, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros if the loss does not depend on it.
    /// Interior node gradients are released during the sweep.
    pub fn wrt(&self, v: Var, shape_of: &Tensor) -> Tensor {
        self.nodes[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape_of.shape()))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Parameter gradients in ascending parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.nodes[v.0].as_ref().map(|g| (id, g)))
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf: an input or constant. Gradients are still recorded for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        let (r, c) = (value.rows(), value.cols());
        let value = value.reshape(&[r, c]).expect("same element count");
        self.push(value, Op::Leaf)
    }

    /// The leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(shape_err("matmul_t", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, 0.0);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulT(a, b)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(shape_err(op, av, rv));
        }
        let c = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, rv.data()[i % c]))
            .collect();
        Ok(Tensor::matrix(av.rows(), c, data))
    }

    /// Add a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "add_row", |x, r| x + r)?;
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Multiply every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "mul_row", |x, r| x * r)?;
        Ok(self.push(value, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| s * x);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * s;
            }
        }
        let xhat = Tensor::matrix(r, c, xhat);
        self.push(xhat.clone(), Op::LayerNormRows { x: a, xhat, rstd })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!("slice_cols {start}..{} of {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(r, len, out), Op::SliceCols { x: a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::matrix(r, total, out), Op::ConcatCols(parts.to_vec())))
    }

    /// Tile a `1 x n` row into `rows x n`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(Error::Shape(format!("repeat_rows expects one row, got {:?}", x.shape())));
        }
        let data = x.data().repeat(rows);
        let c = x.cols();
        Ok(self.push(Tensor::matrix(rows, c, data), Op::RepeatRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Elementwise binary cross-entropy of probabilities `p` against targets,
    /// with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != target.len() {
            return Err(shape_err("bce", pv, target));
        }
        let value = pv
            .zip_map(target, |p, u| {
                let p = p.clamp(eps, 1.0 - eps);
                -(u * p.ln() + (1.0 - u) * (1.0 - p).ln())
            })
            ;
        Ok(self.push(value, Op::Bce { p, target: target.clone(), eps }))
    }

    /// Propagate from a scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, 0.0);
                    acc(&mut grads, *a, Tensor::matrix(m, k, ga));
                    acc(&mut grads, *b, Tensor::matrix(k, n, gb));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), false, &mut ga, 0.0);
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, av.data(), false, &mut gb, 0.0);
                    acc(&mut grads, *a, Tensor::matrix(m, k, ga));
                    acc(&mut grads, *b, Tensor::matrix(n, k, gb));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip_map(val(*b), |x, y| x * y));
                    acc(&mut grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for (i, &x) in g.data().iter().enumerate() {
                        gr[i % c] += x;
                    }
                    let rshape = val(*row).shape().to_vec();
                    acc(&mut grads, *row, Tensor::new(rshape, gr).expect("row shape"));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (val(*a), val(*row));
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    let mut ga = vec![0.0; g.len()];
                    for (i, &x) in g.data().iter().enumerate() {
                        gr[i % c] += x * av.data()[i];
                        ga[i] = x * rv.data()[i % c];
                    }
                    acc(&mut grads, *row, Tensor::new(rv.shape().to_vec(), gr).expect("row shape"));
                    acc(&mut grads, *a, Tensor::matrix(g.rows(), c, ga));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| s * x)),
                Op::Relu(a) => {
                    acc(&mut grads, *a, g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 }))
                }
                Op::Gelu(a) => acc(&mut grads, *a, g.zip_map(val(*a), |x, v| x * gelu_grad(v))),
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Abs(a) => acc(&mut grads, *a, g.zip_map(val(*a), |x, v| x * v.signum() * (v != 0.0) as u8 as f64)),
                Op::Square(a) => acc(&mut grads, *a, g.zip_map(val(*a), |x, v| 2.0 * x * v)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(r, c, ga));
                }
                Op::LayerNormRows { x, xhat, rstd } => {
                    let (r, c) = (xhat.rows(), xhat.cols());
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let (xr, gr) = (xhat.row(i), g.row(i));
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let n = c as f64;
                        for j in 0..c {
                            gx[i * c + j] = rstd[i] / n * (n * gr[j] - sum_g - xr[j] * sum_gx);
                        }
                    }
                    acc(&mut grads, *x, Tensor::matrix(r, c, gx));
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (r, c, len) = (xv.rows(), xv.cols(), g.cols());
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        gx[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *x, Tensor::matrix(r, c, gx));
                }
                Op::ConcatCols(parts) => {
                    let r = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        let mut gp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gp.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        offset += c;
                        acc(&mut grads, p, Tensor::matrix(r, c, gp));
                    }
                }
                Op::RepeatRows(a) => {
                    let c = g.cols();
                    let mut ga = vec![0.0; c];
                    for i in 0..g.rows() {
                        for (s, v) in ga.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(1, c, ga));
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    acc(&mut grads, *a, Tensor::full(val(*a).shape(), s));
                }
                Op::Bce { p, target, eps } => {
                    let pv = val(*p);
                    let data = g
                        .data()
                        .iter()
                        .zip(pv.data())
                        .zip(target.data())
                        .map(|((&x, &p), &u)| {
                            if p <= *eps || p >= 1.0 - eps {
                                0.0
                            } else {
                                x * (p - u) / (p * (1.0 - p))
                            }
                        })
                        .collect();
                    acc(&mut grads, *p, Tensor::new(pv.shape().to_vec(), data).expect("bce shape"));
                }
            }
        }

        let mut params: Vec<_> = self.params.into_iter().collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { nodes: grads, params })
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            z += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= z;
        }
    }
    Tensor::matrix(r, c, out)
}
