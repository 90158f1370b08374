//! Layer building blocks on top of [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{fan_in_uniform, trunc_normal, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How a layer's weights are initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal with the given std, zero bias.
    TruncNormal(f64),
    /// Uniform in ±1/sqrt(fan_in) for weights and bias.
    FanInUniform,
    Zeros,
}

/// Affine map `x · W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init, rng: &mut impl Rng) -> Self {
        let (w, b) = match init {
            Init::TruncNormal(std) => (trunc_normal(rng, &[in_dim, out_dim], std), Tensor::zeros(&[1, out_dim])),
            Init::FanInUniform => (
                fan_in_uniform(rng, &[in_dim, out_dim], in_dim),
                fan_in_uniform(rng, &[1, out_dim], in_dim),
            ),
            Init::Zeros => (Tensor::zeros(&[in_dim, out_dim]), Tensor::zeros(&[1, out_dim])),
        };
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Row-wise layer norm with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x, LAYER_NORM_EPS);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, shift)
    }
}

/// Scaled dot-product attention split across `heads` column blocks.
///
/// `q: Lq x d`, `k, v: Lk x d`; returns `Lq x d`.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("{heads} heads do not divide width {d}")));
    }
    if g.value(k).cols() != d || g.value(v).cols() != d || g.value(k).rows() != g.value(v).rows() {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            g.value(q).shape(),
            g.value(k).shape(),
            g.value(v).shape()
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat_cols(&outs)
}

/// Attention with its own query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize, init: Init, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, init, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, init, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, init, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, init, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let a = multi_head_attention(g, q, k, v, self.heads)?;
        self.out.forward(g, store, a)
    }
}

/// Row-wise softmax of a plain tensor.
pub fn softmax(x: &Tensor) -> Tensor {
    super::graph::softmax_rows(x)
}

/// Per-row standardization (no affine terms).
pub fn layer_norm(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.input(x.as_matrix());
    let y = g.layer_norm_rows(v, LAYER_NORM_EPS);
    g.value(y).clone()
}

pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, w, b) = (g.input(x.as_matrix()), g.input(weight.clone()), g.input(bias.clone()));
    let y = g.matmul(xv, w)?;
    let y = g.add_row(y, b)?;
    Ok(g.value(y).clone())
}

/// Attention on plain tensors without projections.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q.as_matrix()), g.input(k.as_matrix()), g.input(v.as_matrix()));
    let y = multi_head_attention(&mut g, qv, kv, vv, heads)?;
    Ok(g.value(y).clone())
}

/// Per-head attention weight matrices (`Lq x Lk` each).
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 || k.cols() != d {
        return Err(Error::Shape(format!("{heads} heads over q {:?}, k {:?}", q.shape(), k.shape())));
    }
    let dh = d / heads;
    let mut g = Graph::new();
    let (qv, kv) = (g.input(q.as_matrix()), g.input(k.as_matrix()));
    (0..heads)
        .map(|h| {
            let qh = g.slice_cols(qv, h * dh, dh)?;
            let kh = g.slice_cols(kv, h * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let w = g.softmax_rows(s);
            Ok(g.value(w).clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_matrix, RngKey};

    #[test]
    fn single_head_one_hot_attention_by_hand() {
        // K = V = I3, so output row i is softmax(q_i / sqrt(3)).
        let q = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 3.0, 1.0, -1.0]);
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let out = attention(&q, &eye, &eye, 1).unwrap();
        let s = 1.0 / 3f64.sqrt();
        for i in 0..3 {
            let e: Vec<f64> = q.row(i).iter().map(|v| (v * s).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..3 {
                assert!((out.at(i, j) - e[j] / z).abs() < 1e-15);
            }
        }
        // Row 0 by hand: exp(1/sqrt3) / (exp(1/sqrt3) + 2).
        let e = s.exp();
        assert!((out.at(0, 0) - e / (e + 2.0)).abs() < 1e-15);
        assert!((out.at(0, 1) - 1.0 / (e + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = RngKey::new(3).rng();
        let q = normal_matrix(&mut rng, 5, 8);
        let k = normal_matrix(&mut rng, 7, 8);
        for w in attention_weights(&q, &k, 4).unwrap() {
            for i in 0..w.rows() {
                assert!(w.row(i).iter().all(|&p| p >= 0.0));
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let q = Tensor::zeros(&[2, 6]);
        assert!(attention(&q, &q, &q, 4).is_err());
        assert!(attention(&q, &Tensor::zeros(&[2, 5]), &q, 3).is_err());
    }

    #[test]
    fn linear_plain() {
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]);
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 1.0]);
        let b = Tensor::matrix(1, 2, vec![0.5, -0.5]);
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[3.5, 1.5]);
    }
}
