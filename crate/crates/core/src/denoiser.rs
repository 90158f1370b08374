//! The learnable network: scanpath embedding, a transformer encoder whose
//! layers interleave self-attention, cross-attention to the conditioning
//! rows and a feed-forward block, and the two output heads that map a latent
//! back to fixations and validity probabilities.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{ConditioningProjections, JointConditioning, TaskFeature, VisualFeatureMap};
use crate::error::{Error, Result};
use crate::gaze::PaddedScanpath;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::nn::{Attention, Init, LayerNorm, Linear};
use crate::numerics::params::trunc_normal;
use crate::numerics::{Checkpoint, ParamId, ParamStore, RngKey, Tensor};

/// Standard deviation of the truncated-normal init inside the encoder.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub visual_dim: usize,
    pub task_dim: usize,
    pub dropout: f64,
}

impl DenoiserConfig {
    pub fn reference() -> Self {
        Self {
            layers: 6,
            heads: 8,
            model_dim: 512,
            ffn_dim: 2048,
            max_len: 16,
            steps: 1000,
            visual_dim: 768,
            task_dim: 768,
            dropout: 0.1,
        }
    }

    pub fn toy() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 32,
            ffn_dim: 128,
            max_len: 8,
            steps: 100,
            visual_dim: 32,
            task_dim: 16,
            dropout: 0.0,
        }
    }

    /// Smallest useful model, sized for exhaustive gradient checks.
    pub fn micro() -> Self {
        Self {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 32,
            max_len: 4,
            steps: 20,
            visual_dim: 6,
            task_dim: 4,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("{} heads do not divide model_dim {}", self.heads, self.model_dim));
        }
        if self.model_dim < 2 || self.ffn_dim == 0 || self.max_len == 0 || self.steps == 0 {
            return bad(format!("degenerate model size {self:?}"));
        }
        if self.visual_dim == 0 || self.task_dim == 0 {
            return bad("feature widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn to_header(&self) -> Vec<(String, String)> {
        [
            ("model.layers", self.layers.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.model_dim", self.model_dim.to_string()),
            ("model.ffn_dim", self.ffn_dim.to_string()),
            ("model.max_len", self.max_len.to_string()),
            ("model.steps", self.steps.to_string()),
            ("model.visual_dim", self.visual_dim.to_string()),
            ("model.task_dim", self.task_dim.to_string()),
            ("model.dropout", self.dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, path: &std::path::Path) -> Result<Self> {
        fn field<T: std::str::FromStr>(ckpt: &Checkpoint, path: &std::path::Path, key: &str) -> Result<T> {
            ckpt.header_value(key)
                .ok_or_else(|| Error::format(path, format!("missing header key {key}")))?
                .parse()
                .map_err(|_| Error::format(path, format!("bad value for header key {key}")))
        }
        let cfg = Self {
            layers: field(ckpt, path, "model.layers")?,
            heads: field(ckpt, path, "model.heads")?,
            model_dim: field(ckpt, path, "model.model_dim")?,
            ffn_dim: field(ckpt, path, "model.ffn_dim")?,
            max_len: field(ckpt, path, "model.max_len")?,
            steps: field(ckpt, path, "model.steps")?,
            visual_dim: field(ckpt, path, "model.visual_dim")?,
            task_dim: field(ckpt, path, "model.task_dim")?,
            dropout: field(ckpt, path, "model.dropout")?,
        };
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }
}

/// `L x d` latent at a diffusion timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub matrix: Tensor,
    pub timestep: usize,
}

/// Sinusoidal encoding of a timestep: sines in the first half of the
/// channels, cosines in the second, geometric frequencies from 1 to 1/10000.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[derive(Clone, Debug)]
struct Block {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    norm_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    pub conditioning: ConditioningProjections,
    embed: Linear,
    position: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    output: Linear,
    head: [Linear; 3],
    validity: Linear,
}

/// Output of the two heads on an `L x d` latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// `L x 3` rows of `(x, y, duration)`.
    pub scanpath: Tensor,
    /// Validity probability per row.
    pub validity: Vec<f64>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngKey::new(seed).fork("init").rng();
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let tn = Init::TruncNormal(INIT_STD);

        let conditioning = ConditioningProjections::new(&mut store, config.visual_dim, config.task_dim, d, rng);
        let embed = Linear::new(&mut store, "embed", 3, d, Init::FanInUniform, rng);
        let position = store.add("position", trunc_normal(rng, &[config.max_len, d], INIT_STD));
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("layer{i}");
                Block {
                    norm_self: LayerNorm::new(&mut store, &format!("{p}.norm_self"), d),
                    self_attn: Attention::new(&mut store, &format!("{p}.self"), d, d, config.heads, tn, rng),
                    norm_cross: LayerNorm::new(&mut store, &format!("{p}.norm_cross"), d),
                    cross_attn: Attention::new(&mut store, &format!("{p}.cross"), d, d, config.heads, tn, rng),
                    norm_ffn: LayerNorm::new(&mut store, &format!("{p}.norm_ffn"), d),
                    ffn_in: Linear::new(&mut store, &format!("{p}.ffn_in"), d, config.ffn_dim, tn, rng),
                    ffn_out: Linear::new(&mut store, &format!("{p}.ffn_out"), config.ffn_dim, d, tn, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut store, "final_norm", d);
        let output = Linear::new(&mut store, "output", d, d, tn, rng);
        let head = [
            Linear::new(&mut store, "head.0", d, d, Init::FanInUniform, rng),
            Linear::new(&mut store, "head.1", d, d / 2, Init::FanInUniform, rng),
            Linear::new(&mut store, "head.2", d / 2, 3, Init::FanInUniform, rng),
        ];
        let validity = Linear::new(&mut store, "validity", d, 1, Init::FanInUniform, rng);
        Ok(Self {
            config,
            store,
            conditioning,
            embed,
            position,
            blocks,
            final_norm,
            output,
            head,
            validity,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.steps {
            return Err(Error::Schedule(format!("timestep {t} outside [1, {}]", self.config.steps)));
        }
        Ok(())
    }

    // Graph builders. `store` is passed separately so gradient checks can
    // evaluate perturbed copies of the parameters.

    pub fn embed_graph(&self, g: &mut Graph, store: &ParamStore, p: &PaddedScanpath) -> Result<Var> {
        if p.max_len != self.config.max_len || p.matrix.len() != 3 * p.max_len {
            return Err(Error::Shape(format!(
                "scanpath has {} rows, model expects {}",
                p.max_len, self.config.max_len
            )));
        }
        let x = g.input(Tensor::matrix(p.max_len, 3, p.matrix.clone()));
        self.embed.forward(g, store, x)
    }

    pub fn condition_graph(&self, g: &mut Graph, store: &ParamStore, vmap: &VisualFeatureMap, task: &TaskFeature) -> Result<Var> {
        self.conditioning.forward(g, store, vmap, task)
    }

    /// Predict `z̃_0` from `z_t`. With `dropout` set, residual branches are
    /// dropped using masks drawn from it.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_t: Var,
        t: usize,
        cond: Var,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_timestep(t)?;
        let (l, d) = (self.config.max_len, self.config.model_dim);
        let zs = g.value(z_t).shape().to_vec();
        if zs != [l, d] {
            return Err(Error::Shape(format!("latent {zs:?}, expected [{l}, {d}]")));
        }
        if g.value(cond).cols() != d {
            return Err(Error::Shape(format!("conditioning width {} vs model width {d}", g.value(cond).cols())));
        }
        let pos = g.param(store, self.position);
        let time = g.input(Tensor::matrix(1, d, timestep_embedding(t, d)));
        let mut h = g.add(z_t, pos)?;
        h = g.add_row(h, time)?;

        let p = self.config.dropout;
        for b in &self.blocks {
            let n = b.norm_self.forward(g, store, h)?;
            let a = b.self_attn.forward(g, store, n, n)?;
            let a = drop(g, a, p, dropout.as_deref_mut())?;
            h = g.add(h, a)?;

            let n = b.norm_cross.forward(g, store, h)?;
            let a = b.cross_attn.forward(g, store, n, cond)?;
            let a = drop(g, a, p, dropout.as_deref_mut())?;
            h = g.add(h, a)?;

            let n = b.norm_ffn.forward(g, store, h)?;
            let f = b.ffn_in.forward(g, store, n)?;
            let f = g.gelu(f);
            let f = b.ffn_out.forward(g, store, f)?;
            let f = drop(g, f, p, dropout.as_deref_mut())?;
            h = g.add(h, f)?;
        }
        let n = self.final_norm.forward(g, store, h)?;
        self.output.forward(g, store, n)
    }

    /// Returns `(scanpath L x 3, validity probabilities L x 1)`.
    pub fn reconstruct_graph(&self, g: &mut Graph, store: &ParamStore, z0: Var) -> Result<(Var, Var)> {
        let h = self.head[0].forward(g, store, z0)?;
        let h = g.relu(h);
        let h = self.head[1].forward(g, store, h)?;
        let h = g.relu(h);
        let s = self.head[2].forward(g, store, h)?;
        let u = self.validity.forward(g, store, z0)?;
        Ok((s, g.sigmoid(u)))
    }

    // Plain-tensor entry points on the current parameters.

    pub fn embed_scanpath(&self, p: &PaddedScanpath) -> Result<LatentSequence> {
        let mut g = Graph::new();
        let z = self.embed_graph(&mut g, &self.store, p)?;
        Ok(LatentSequence {
            matrix: g.value(z).clone(),
            timestep: 0,
        })
    }

    pub fn joint_conditioning(&self, vmap: &VisualFeatureMap, task: &TaskFeature) -> Result<JointConditioning> {
        self.conditioning.embed(&self.store, vmap, task)
    }

    pub fn forward(&self, z_t: &LatentSequence, cond: &JointConditioning) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.input(z_t.matrix.clone());
        let c = g.input(cond.matrix.clone());
        let out = self.forward_graph(&mut g, &self.store, z, z_t.timestep, c, None)?;
        Ok(g.value(out).clone())
    }

    pub fn reconstruct(&self, z0: &Tensor) -> Result<Reconstruction> {
        let mut g = Graph::new();
        let z = g.input(z0.clone());
        let (s, u) = self.reconstruct_graph(&mut g, &self.store, z)?;
        Ok(Reconstruction {
            scanpath: g.value(s).clone(),
            validity: g.value(u).data().to_vec(),
        })
    }

    /// Config in the header, one tensor per parameter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: self.config.to_header(),
            tensors: self.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, path: &std::path::Path) -> Result<Self> {
        let config = DenoiserConfig::from_checkpoint(ckpt, path)?;
        let mut model = Self::new(config, 0)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let t = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
            if t.shape() != model.store.value(id).shape() {
                return Err(Error::format(
                    path,
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), model.store.value(id).shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!("non-finite values in tensor {name}")));
            }
            *model.store.value_mut(id) = t.clone();
        }
        Ok(model)
    }
}

/// Inverted dropout through a random mask.
fn drop(g: &mut Graph, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..shape[0] * shape[1])
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = g.input(Tensor::matrix(shape[0], shape[1], mask));
    g.mul(x, m)
}
