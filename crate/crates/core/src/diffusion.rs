//! Noise schedule, forward corruption, the four-part training objective with
//! importance-sampled timesteps, and the reverse sampling chain.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::conditioning::{JointConditioning, TaskFeature, VisualFeatureMap};
use crate::denoiser::{Denoiser, DenoiserConfig, LatentSequence};
use crate::error::{Error, Result};
use crate::gaze::{decode_length, pad_truncate, Fixation, PaddedScanpath, Scanpath, DEFAULT_VALIDITY_THRESHOLD};
use crate::numerics::gradcheck::{check_params, GradCheck};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::rng::normal_matrix;
use crate::numerics::{Gradients, ParamStore, RngKey, Tensor};

pub const SCHEDULE_OFFSET: f64 = 1e-4;
pub const SCHEDULE_FLOOR: f64 = 1e-5;
pub const BCE_EPS: f64 = 1e-7;
/// Shortest decoded duration, seconds.
pub const MIN_DURATION: f64 = 1e-3;
pub const HISTORY_LEN: usize = 10;
/// Share of uniform probability mixed into importance sampling, so every
/// timestep keeps probability at least `UNIFORM_SHARE / T`.
pub const UNIFORM_SHARE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub offset: f64,
    /// `T + 1` entries, `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    /// `beta[t - 1]` is `β_t` for `t` in `1..=T`.
    pub beta: Vec<f64>,
}

/// `1 - sqrt(t/T + s)` before clamping.
pub fn sqrt_closed_form(t: usize, steps: usize, s: f64) -> f64 {
    1.0 - (t as f64 / steps as f64 + s).sqrt()
}

/// Square-root schedule `ᾱ_t = 1 - sqrt(t/T + s)` for `t ≥ 1`, clamped below
/// at [`SCHEDULE_FLOOR`]. Only the final step may reach the clamp; anything
/// earlier would break strict monotonicity and is rejected.
pub fn sqrt_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("T must be at least 1".into()));
    }
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Schedule(format!("offset {s} outside (0, 1)")));
    }
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for t in 1..=steps {
        let a = sqrt_closed_form(t, steps, s);
        if a <= SCHEDULE_FLOOR && t < steps {
            return Err(Error::Schedule(format!(
                "alpha_bar reaches {a:e} at t={t} of {steps}; offset {s} is too large"
            )));
        }
        alpha_bar.push(a.clamp(SCHEDULE_FLOOR, 1.0));
    }
    let beta: Vec<f64> = (1..=steps).map(|t| 1.0 - alpha_bar[t] / alpha_bar[t - 1]).collect();
    if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
        return Err(Error::Schedule("beta outside (0, 1)".into()));
    }
    Ok(NoiseSchedule {
        steps,
        offset: s,
        alpha_bar,
        beta,
    })
}

impl NoiseSchedule {
    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Schedule(format!("timestep {t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }

    /// Coefficients of the posterior mean `c0 · z̃_0 + ct · z_t` and the
    /// posterior variance for step `t`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (ab, ab_prev, b) = (self.alpha_bar[t], self.alpha_bar[t - 1], self.beta_at(t));
        let c0 = ab_prev.sqrt() * b / (1.0 - ab);
        let ct = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * b;
        (c0, ct, var)
    }
}

/// `z_t = sqrt(ᾱ_t) z_0 + sqrt(1 - ᾱ_t) ε`.
pub fn q_sample(schedule: &NoiseSchedule, z0: &LatentSequence, t: usize, noise: &Tensor) -> Result<LatentSequence> {
    schedule.check(t)?;
    if noise.shape() != z0.matrix.shape() {
        return Err(Error::Shape(format!("noise {:?} vs latent {:?}", noise.shape(), z0.matrix.shape())));
    }
    let (a, b) = (schedule.alpha_bar[t].sqrt(), (1.0 - schedule.alpha_bar[t]).sqrt());
    Ok(LatentSequence {
        matrix: z0.matrix.zip_map(noise, |z, e| a * z + b * e),
        timestep: t,
    })
}

fn q_sample_graph(g: &mut Graph, schedule: &NoiseSchedule, z0: Var, t: usize, noise: &Tensor) -> Result<Var> {
    let ab = schedule.alpha_bar[t];
    let signal = g.scale(z0, ab.sqrt());
    let noise = g.input(noise.map(|e| (1.0 - ab).sqrt() * e));
    g.add(signal, noise)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub vlb: f64,
    pub rec: f64,
    pub val: f64,
    pub prior: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_parts(vlb: f64, rec: f64, val: f64, prior: f64) -> Self {
        Self {
            vlb,
            rec,
            val,
            prior,
            total: vlb + rec + val + prior,
        }
    }
}

/// Masked mean over valid rows of the per-row L1 distance.
pub fn rec_loss(target: &PaddedScanpath, pred: &Tensor) -> f64 {
    let n = target.validity.iter().filter(|&&u| u > 0.5).count();
    if n == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (i, &u) in target.validity.iter().enumerate() {
        if u > 0.5 {
            sum += (0..3).map(|c| (target.matrix[3 * i + c] - pred.at(i, c)).abs()).sum::<f64>();
        }
    }
    sum / n as f64
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn val_loss(target: &[f64], probs: &[f64]) -> f64 {
    let n = target.len() as f64;
    target
        .iter()
        .zip(probs)
        .map(|(&u, &p)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(u * p.ln() + (1.0 - u) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Per-timestep history of recent `L_VLB` values driving importance sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepSampler {
    pub steps: usize,
    /// Oldest first, at most [`HISTORY_LEN`] per timestep.
    history: Vec<Vec<f64>>,
}

impl TimestepSampler {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            history: vec![Vec::new(); steps],
        }
    }

    pub fn history(&self, t: usize) -> &[f64] {
        &self.history[t - 1]
    }

    pub fn warmed_up(&self) -> bool {
        self.history.iter().all(|h| h.len() == HISTORY_LEN)
    }

    pub fn record(&mut self, t: usize, loss: f64) {
        let h = &mut self.history[t - 1];
        if h.len() == HISTORY_LEN {
            h.remove(0);
        }
        h.push(f64::from(loss as f32));
    }

    /// Sampling distribution over `t = 1..=T` (index `t - 1`).
    pub fn probabilities(&self) -> Vec<f64> {
        let uniform = vec![1.0 / self.steps as f64; self.steps];
        if !self.warmed_up() {
            return uniform;
        }
        let w: Vec<f64> = self
            .history
            .iter()
            .map(|h| (h.iter().map(|v| v * v).sum::<f64>() / h.len() as f64).sqrt())
            .collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return uniform;
        }
        let floor = UNIFORM_SHARE / self.steps as f64;
        w.iter().map(|x| x / total * (1.0 - UNIFORM_SHARE) + floor).collect()
    }

    /// Draw `(t, weight)` with `weight = 1 / (T p_t)`; during warmup `t` is
    /// uniform and the weight is 1.
    pub fn sample(&self, rng: &mut impl Rng) -> (usize, f64) {
        if !self.warmed_up() {
            return (rng.random_range(1..=self.steps), 1.0);
        }
        let p = self.probabilities();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.steps - 1;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                idx = i;
                break;
            }
        }
        (idx + 1, 1.0 / (self.steps as f64 * p[idx]))
    }

    /// `T x HISTORY_LEN` values (zero padded) and per-step counts.
    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let mut values = Tensor::zeros(&[self.steps, HISTORY_LEN]);
        let mut counts = Tensor::zeros(&[self.steps, 1]);
        for (t, h) in self.history.iter().enumerate() {
            values.data_mut()[t * HISTORY_LEN..t * HISTORY_LEN + h.len()].copy_from_slice(h);
            counts.data_mut()[t] = h.len() as f64;
        }
        (values, counts)
    }

    pub fn from_tensors(values: &Tensor, counts: &Tensor) -> Result<Self> {
        let steps = counts.len();
        if values.shape() != [steps, HISTORY_LEN] {
            return Err(Error::Shape(format!("sampler history {:?}", values.shape())));
        }
        let mut history = Vec::with_capacity(steps);
        for t in 0..steps {
            let n = counts.data()[t] as usize;
            if n > HISTORY_LEN {
                return Err(Error::Shape(format!("sampler count {n} at t={}", t + 1)));
            }
            history.push(values.data()[t * HISTORY_LEN..t * HISTORY_LEN + n].to_vec());
        }
        Ok(Self { steps, history })
    }
}

/// One training example with its features.
#[derive(Clone, Debug)]
pub struct TrainingItem {
    pub scanpath: PaddedScanpath,
    pub visual: Arc<VisualFeatureMap>,
    pub task: Arc<TaskFeature>,
}

/// Randomness consumed by one item's loss.
#[derive(Clone, Debug)]
pub struct ItemDraw {
    pub t: usize,
    pub weight: f64,
    pub noise: Tensor,
    /// Dropout stream; `None` evaluates deterministically.
    pub dropout: Option<RngKey>,
}

impl ItemDraw {
    pub fn new(model: &Denoiser, sampler: &TimestepSampler, key: RngKey, train: bool) -> Self {
        let mut rng = key.fork("timestep").rng();
        let (t, weight) = sampler.sample(&mut rng);
        let noise = normal_matrix(&mut key.fork("noise").rng(), model.config.max_len, model.config.model_dim);
        Self {
            t,
            weight,
            noise,
            dropout: train.then(|| key.fork("dropout")),
        }
    }
}

/// Scalar loss nodes of one item.
#[derive(Clone, Copy, Debug)]
pub struct ItemLoss {
    pub vlb: Var,
    pub rec: Var,
    pub val: Var,
    pub prior: Var,
    pub total: Var,
    /// Unweighted `mean ||z_0 - z̃_0||²`, what the sampler records.
    pub raw_vlb: f64,
}

/// Record one item's loss terms on `g`.
pub fn item_loss_graph(
    g: &mut Graph,
    model: &Denoiser,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    item: &TrainingItem,
    draw: &ItemDraw,
    use_prior: bool,
) -> Result<ItemLoss> {
    let cfg = &model.config;
    if schedule.steps != cfg.steps {
        return Err(Error::Config(format!("schedule has T={}, model T={}", schedule.steps, cfg.steps)));
    }
    schedule.check(draw.t)?;
    let z0 = model.embed_graph(g, store, &item.scanpath)?;
    let cond = model.condition_graph(g, store, &item.visual, &item.task)?;
    let zt = q_sample_graph(g, schedule, z0, draw.t, &draw.noise)?;
    let mut drop_rng: Option<ChaCha8Rng> = draw.dropout.map(RngKey::rng);
    let pred = model.forward_graph(g, store, zt, draw.t, cond, drop_rng.as_mut())?;

    let diff = g.sub(z0, pred)?;
    let sq = g.square(diff);
    let mse = g.mean(sq);
    let raw_vlb = g.value(mse).data()[0];
    let vlb = g.scale(mse, draw.weight);

    let (s, u) = model.reconstruct_graph(g, store, pred)?;
    let l = cfg.max_len;
    let target = g.input(Tensor::matrix(l, 3, item.scanpath.matrix.clone()));
    let n_valid = item.scanpath.validity.iter().filter(|&&v| v > 0.5).count();
    let mask: Vec<f64> = item
        .scanpath
        .validity
        .iter()
        .flat_map(|&v| [if v > 0.5 { 1.0 } else { 0.0 }; 3])
        .collect();
    let mask = g.input(Tensor::matrix(l, 3, mask));
    let d = g.sub(s, target)?;
    let d = g.abs(d);
    let d = g.mul(d, mask)?;
    let d = g.sum(d);
    let rec = g.scale(d, 1.0 / n_valid.max(1) as f64);

    let bce = g.bce(u, &Tensor::matrix(l, 1, item.scanpath.validity.clone()), BCE_EPS)?;
    let val = g.mean(bce);

    let end = g.scale(z0, schedule.alpha_bar[schedule.steps].sqrt());
    let end = g.square(end);
    let prior = g.mean(end);
    let prior = g.scale(prior, if use_prior { 1.0 } else { 0.0 });

    let a = g.add(vlb, rec)?;
    let b = g.add(val, prior)?;
    let total = g.add(a, b)?;
    Ok(ItemLoss {
        vlb,
        rec,
        val,
        prior,
        total,
        raw_vlb,
    })
}

/// Loss values of one item, with parameter gradients when requested.
pub struct ItemResult {
    pub loss: LossBreakdown,
    pub t: usize,
    pub raw_vlb: f64,
    pub grads: Option<Gradients>,
}

pub fn item_loss(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    item: &TrainingItem,
    draw: &ItemDraw,
    use_prior: bool,
    with_grads: bool,
) -> Result<ItemResult> {
    let mut g = Graph::new();
    let l = item_loss_graph(&mut g, model, &model.store, schedule, item, draw, use_prior)?;
    let scalar = |v: Var| g.value(v).data()[0];
    let loss = LossBreakdown::from_parts(scalar(l.vlb), scalar(l.rec), scalar(l.val), scalar(l.prior));
    if !loss.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss:?}")));
    }
    let grads = if with_grads { Some(g.backward(l.total)?) } else { None };
    Ok(ItemResult {
        loss,
        t: draw.t,
        raw_vlb: l.raw_vlb,
        grads,
    })
}

/// Batch-mean losses, item `i` drawing its randomness from `key.at(i)`.
///
/// Items are evaluated in parallel; results come back in item order.
pub fn batch_losses(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    sampler: &TimestepSampler,
    batch: &[TrainingItem],
    key: RngKey,
    use_prior: bool,
    train: bool,
) -> Result<Vec<ItemResult>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let draw = ItemDraw::new(model, sampler, key.at(i as u64), train);
            item_loss(model, schedule, item, &draw, use_prior, train)
        })
        .collect()
}

pub fn mean_breakdown(results: &[ItemResult]) -> LossBreakdown {
    let n = results.len() as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| results.iter().map(|r| f(&r.loss)).sum::<f64>() / n;
    LossBreakdown::from_parts(sum(|l| l.vlb), sum(|l| l.rec), sum(|l| l.val), sum(|l| l.prior))
}

/// Batch-mean loss breakdown without gradients or dropout.
pub fn compute_losses(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    sampler: &TimestepSampler,
    batch: &[TrainingItem],
    key: RngKey,
) -> Result<LossBreakdown> {
    Ok(mean_breakdown(&batch_losses(model, schedule, sampler, batch, key, true, false)?))
}

/// Run the reverse chain from `z_T ~ N(0, I)` and return the final `z_0`.
pub fn sample_latent(model: &Denoiser, cond: &JointConditioning, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Tensor> {
    let cfg = &model.config;
    if schedule.steps != cfg.steps {
        return Err(Error::Config(format!("schedule has T={}, model T={}", schedule.steps, cfg.steps)));
    }
    let (l, d) = (cfg.max_len, cfg.model_dim);
    let mut z = normal_matrix(rng, l, d);
    for t in (1..=schedule.steps).rev() {
        let mut step = Graph::new();
        let zv = step.input(z.clone());
        let cv = step.input(cond.matrix.clone());
        let pred = model.forward_graph(&mut step, &model.store, zv, t, cv, None)?;
        let pred = step.value(pred);
        let (c0, ct, var) = schedule.posterior(t);
        let sd = var.sqrt();
        let noise = if t > 1 { Some(normal_matrix(rng, l, d)) } else { None };
        let mut next = pred.zip_map(&z, |p, zt| c0 * p + ct * zt);
        if let Some(e) = noise {
            next.add_scaled(&e, sd);
        }
        if !next.is_finite() {
            return Err(Error::Numerical(format!("non-finite latent at t={t}")));
        }
        z = next;
    }
    Ok(z)
}

/// Decode a final latent to fixations: heads, length from validity, clamps.
pub fn decode_latent(model: &Denoiser, z0: &Tensor) -> Result<Vec<Fixation>> {
    let r = model.reconstruct(z0)?;
    if !r.scanpath.is_finite() || r.validity.iter().any(|u| !u.is_finite()) {
        return Err(Error::Numerical("non-finite reconstruction".into()));
    }
    let n = decode_length(&r.validity, DEFAULT_VALIDITY_THRESHOLD);
    Ok((0..n)
        .map(|i| {
            let row = r.scanpath.row(i);
            Fixation::new(row[0].clamp(0.0, 1.0), row[1].clamp(0.0, 1.0), row[2].max(MIN_DURATION))
        })
        .collect())
}

pub fn sample_scanpath(
    model: &Denoiser,
    cond: &JointConditioning,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
    stimulus_id: &str,
    task: &str,
) -> Result<Scanpath> {
    let z0 = sample_latent(model, cond, schedule, rng)?;
    Ok(Scanpath::new(decode_latent(model, &z0)?, stimulus_id, task))
}

/// `n` independent chains, chain `i` seeded from `key.at(i)`.
pub fn sample_many(
    model: &Denoiser,
    cond: &JointConditioning,
    schedule: &NoiseSchedule,
    key: RngKey,
    n: usize,
    stimulus_id: &str,
    task: &str,
) -> Result<Vec<Scanpath>> {
    (0..n)
        .into_par_iter()
        .map(|i| sample_scanpath(model, cond, schedule, &mut key.at(i as u64).rng(), stimulus_id, task))
        .collect()
}

/// Finite-difference check of one item's total training loss against the
/// parameters of a freshly initialized model. `per_param` limits how many
/// coordinates of each parameter are perturbed.
pub fn loss_gradcheck(config: DenoiserConfig, seed: u64, per_param: Option<usize>) -> Result<GradCheck> {
    let key = RngKey::new(seed).fork("gradcheck-model");
    let mut model = Denoiser::new(config, key.fork("init").raw())?;
    let cfg = model.config.clone();
    let mut rng = key.fork("data").rng();
    let n = rng.random_range(1..=cfg.max_len);
    let fixations = (0..n)
        .map(|_| Fixation::new(rng.random(), rng.random(), rng.random_range(0.05..0.6)))
        .collect();
    let scanpath = pad_truncate(&Scanpath::new(fixations, "s", "t"), cfg.max_len);
    let (h, w) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
    let visual = normal_matrix(&mut rng, h * w, cfg.visual_dim).into_data();
    let item = TrainingItem {
        scanpath,
        visual: Arc::new(VisualFeatureMap::new(h, w, cfg.visual_dim, visual)?),
        task: Arc::new(TaskFeature {
            vector: normal_matrix(&mut rng, 1, cfg.task_dim).into_data(),
        }),
    };
    let schedule = sqrt_schedule(cfg.steps, SCHEDULE_OFFSET)?;
    let draw = ItemDraw {
        t: rng.random_range(1..=cfg.steps),
        weight: rng.random_range(0.5..2.0),
        noise: normal_matrix(&mut rng, cfg.max_len, cfg.model_dim),
        dropout: None,
    };
    let mut store = std::mem::take(&mut model.store);
    check_params("denoiser-loss", &mut store, per_param, &mut key.fork("coords").rng(), |s| {
        let mut g = Graph::new();
        let l = item_loss_graph(&mut g, &model, s, &schedule, &item, &draw, true)?;
        Ok((g, l.total))
    })
}


/// Coordinates per parameter tensor perturbed in the toy-model check.
pub const TOY_GRADCHECK_COORDS: usize = 2;

/// Every gradient check for one seed: the op suite, the MLP, the micro
/// model's loss over all coordinates and the toy model's loss over
/// [`TOY_GRADCHECK_COORDS`] coordinates per tensor.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut checks = crate::numerics::gradcheck::op_suite(seed)?;
    checks.push(crate::numerics::gradcheck::mlp_check(seed)?);
    let mut micro = loss_gradcheck(DenoiserConfig::micro(), seed, None)?;
    micro.name = "denoiser-loss-micro".into();
    checks.push(micro);
    let mut toy = loss_gradcheck(DenoiserConfig::toy(), seed, Some(TOY_GRADCHECK_COORDS))?;
    toy.name = "denoiser-loss-toy".into();
    checks.push(toy);
    Ok(checks)
}
