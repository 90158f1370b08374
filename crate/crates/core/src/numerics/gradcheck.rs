//! Central finite-difference checks of the analytic gradients.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of the backward rules it validates.

use rand::Rng;

use super::graph::{Graph, Var};
use super::nn::multi_head_attention;
use super::params::ParamStore;
use super::rng::{normal_matrix, RngKey};
use super::tensor::Tensor;
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance bound on the relative error.
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to round-off compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    /// Where the largest error occurred: tensor name, flat index, analytic
    /// and numeric values.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR
    }
}

/// One-sided slopes differing by more than this fraction of their size mean
/// the stencil straddles a kink (ReLU, absolute value, clamp).
const KINK_RATIO: f64 = 0.1;
/// Step shrink factor and number of retries after a kink is detected.
const KINK_SHRINK: f64 = 1e-2;
const KINK_RETRIES: usize = 2;

/// Central difference of `f` at `x0`.
///
/// When the one-sided slopes disagree sharply, the interval contains a point
/// where `f` is not differentiable and the central difference is meaningless
/// there; the step is then shrunk so that the stencil lies on one side of it.
fn central_difference(x0: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mid = f(x0)?;
    let mut h = FD_STEP;
    let mut numeric = 0.0;
    for attempt in 0..=KINK_RETRIES {
        let up = f(x0 + h)?;
        let down = f(x0 - h)?;
        numeric = (up - down) / (2.0 * h);
        let (fwd, bwd) = ((up - mid) / h, (mid - down) / h);
        let kink = (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()).max(REL_ERROR_FLOOR);
        if !kink || attempt == KINK_RETRIES {
            break;
        }
        h *= KINK_SHRINK;
    }
    Ok(numeric)
}

fn scalar_of(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Check gradients of `f` with respect to its leaf inputs.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(scalar_of(&g, loss))
    };
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut at = None;
    let mut coords = 0;
    let mut vals = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var, &inputs[k]);
        for i in 0..inputs[k].len() {
            let orig = vals[k].data()[i];
            let numeric = central_difference(orig, |x| {
                vals[k].data_mut()[i] = x;
                eval(&vals)
            })?;
            vals[k].data_mut()[i] = orig;
            let err = rel_error(analytic.data()[i], numeric);
            if err > worst || at.is_none() {
                worst = err;
                at = Some((format!("input{k}"), i, analytic.data()[i], numeric));
            }
            coords += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        coords,
        worst: at,
    })
}

/// Check parameter gradients of a scalar built by `f` from `store`.
///
/// With `per_param = Some(n)`, at most `n` randomly chosen coordinates of
/// each parameter are perturbed.
pub fn check_params<F>(name: &str, store: &mut ParamStore, per_param: Option<usize>, rng: &mut impl Rng, f: F) -> Result<GradCheck>
where
    F: Fn(&ParamStore) -> Result<(Graph, Var)>,
{
    let (g, loss) = f(store)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = store
        .ids()
        .map(|id| {
            grads
                .params()
                .find(|(pid, _)| *pid == id)
                .map(|(_, t)| t.clone())
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
        })
        .collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let (g, loss) = f(s)?;
        Ok(scalar_of(&g, loss))
    };
    let mut worst = 0.0f64;
    let mut at = None;
    let mut coords = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = store.value(id).data()[i];
            let numeric = central_difference(orig, |x| {
                store.value_mut(id).data_mut()[i] = x;
                eval(store)
            })?;
            store.value_mut(id).data_mut()[i] = orig;
            let a = analytic[id.index()].data()[i];
            let err = rel_error(a, numeric);
            if err > worst || at.is_none() {
                worst = err;
                at = Some((store.get(id).name.clone(), i, a, numeric));
            }
            coords += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        coords,
        worst: at,
    })
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn probabilities(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.05..0.95)).collect())
}

/// Contract an arbitrary-shape output with fixed random weights.
fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.input(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Every differentiable graph op, checked once for `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let key = RngKey::new(seed).fork("gradcheck-ops");
    let mut rng = key.rng();
    let (r, c) = (rng.random_range(1..5usize), rng.random_range(2..6usize));
    let mut n = |rows, cols| normal_matrix(&mut rng, rows, cols);
    let a = n(r, c);
    let b = n(r, c);
    let bt = n(c, 3);
    let row = n(1, c);
    let w_rc = n(r, c);
    let w_r3 = n(r, 3);
    let w_rr = n(r, r);
    let w_r2c = n(r, 2 * c);
    let w_4c = n(4, c);
    let w_r1 = n(r, 1);
    let q = n(3, 4);
    let kv = n(5, 4);
    let v = n(5, 4);
    let w_34 = n(3, 4);
    let mut rng = key.fork("special").rng();
    let kinked = away_from_zero(&mut rng, r, c);
    let probs = probabilities(&mut rng, r, c);
    let targets = Tensor::matrix(r, c, (0..r * c).map(|_| f64::from(rng.random::<bool>() as u8)).collect());

    let mut out = Vec::new();
    out.push(check_inputs("matmul", &[a.clone(), bt.clone()], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        weighted_sum(g, y, &w_r3)
    })?);
    out.push(check_inputs("matmul_t", &[a.clone(), b.clone()], |g, x| {
        let y = g.matmul_t(x[0], x[1])?;
        weighted_sum(g, y, &w_rr)
    })?);
    out.push(check_inputs("add", &[a.clone(), b.clone()], |g, x| {
        let y = g.add(x[0], x[1])?;
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("sub", &[a.clone(), b.clone()], |g, x| {
        let y = g.sub(x[0], x[1])?;
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("mul", &[a.clone(), b.clone()], |g, x| {
        let y = g.mul(x[0], x[1])?;
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("add_row", &[a.clone(), row.clone()], |g, x| {
        let y = g.add_row(x[0], x[1])?;
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("mul_row", &[a.clone(), row.clone()], |g, x| {
        let y = g.mul_row(x[0], x[1])?;
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("scale", &[a.clone()], |g, x| {
        let y = g.scale(x[0], -1.7);
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("relu", &[kinked.clone()], |g, x| {
        let y = g.relu(x[0]);
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("gelu", &[a.clone()], |g, x| {
        let y = g.gelu(x[0]);
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("sigmoid", &[a.clone()], |g, x| {
        let y = g.sigmoid(x[0]);
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("abs", &[kinked], |g, x| {
        let y = g.abs(x[0]);
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("square", &[a.clone()], |g, x| {
        let y = g.square(x[0]);
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("softmax_rows", &[a.clone()], |g, x| {
        let y = g.softmax_rows(x[0]);
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("layer_norm_rows", &[a.clone()], |g, x| {
        let y = g.layer_norm_rows(x[0], 1e-5);
        weighted_sum(g, y, &w_rc)
    })?);
    out.push(check_inputs("slice_cols", &[a.clone()], |g, x| {
        let y = g.slice_cols(x[0], 1, c - 1)?;
        let y = g.square(y);
        Ok(g.sum(y))
    })?);
    out.push(check_inputs("concat_cols", &[a.clone(), b.clone()], |g, x| {
        let y = g.concat_cols(&[x[0], x[1]])?;
        weighted_sum(g, y, &w_r2c)
    })?);
    out.push(check_inputs("repeat_rows", &[row.clone()], |g, x| {
        let y = g.repeat_rows(x[0], 4)?;
        weighted_sum(g, y, &w_4c)
    })?);
    out.push(check_inputs("sum", &[a.clone()], |g, x| {
        let y = g.square(x[0]);
        Ok(g.sum(y))
    })?);
    out.push(check_inputs("mean", &[a.clone()], |g, x| {
        let y = g.square(x[0]);
        Ok(g.mean(y))
    })?);
    out.push(check_inputs("bce", &[probs], |g, x| {
        let y = g.bce(x[0], &targets, 1e-7)?;
        Ok(g.mean(y))
    })?);
    out.push(check_inputs("multi_head_attention", &[q, kv, v], |g, x| {
        let y = multi_head_attention(g, x[0], x[1], x[2], 2)?;
        weighted_sum(g, y, &w_34)
    })?);
    out.push(check_inputs("linear_chain", &[a, bt, w_r1.clone()], |g, x| {
        let h = g.matmul(x[0], x[1])?;
        let h = g.gelu(h);
        let s = g.slice_cols(h, 0, 1)?;
        let y = g.mul(s, x[2])?;
        Ok(g.sum(y))
    })?);
    Ok(out)
}

/// Random 3-layer MLP on a random input, checked against its parameters.
pub fn mlp_check(seed: u64) -> Result<GradCheck> {
    use super::nn::{Init, Linear};
    let key = RngKey::new(seed).fork("gradcheck-mlp");
    let mut rng = key.rng();
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 4, 6, Init::FanInUniform, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 6, 5, Init::FanInUniform, &mut rng);
    let l3 = Linear::new(&mut store, "l3", 5, 2, Init::FanInUniform, &mut rng);
    let x = normal_matrix(&mut rng, 3, 4);
    check_params("mlp", &mut store, None, &mut key.fork("coords").rng(), |s| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let h = l1.forward(&mut g, s, xv)?;
        let h = g.gelu(h);
        let h = l2.forward(&mut g, s, h)?;
        let h = g.sigmoid(h);
        let y = l3.forward(&mut g, s, h)?;
        let y = g.square(y);
        let loss = g.mean(y);
        Ok((g, loss))
    })
}
