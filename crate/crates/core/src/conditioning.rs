//! Visual and task features, and their fusion into the joint conditioning
//! matrix consumed by the denoiser's cross-attention.
//!
//! Pretrained backbones are not run here. Features arrive either from `SDFT`
//! files or from [`toy_encode`], a seeded random-projection encoder for
//! desk-scale experiments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::nn::{Init, Linear};
use crate::numerics::{ParamStore, RngKey, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"SDFT";
pub const FEATURE_VERSION: u32 = 1;

/// Target categories of the visual-search vocabulary; the empty string
/// (free viewing) is added in front.
pub const SEARCH_CATEGORIES: [&str; 18] = [
    "bottle",
    "bowl",
    "car",
    "chair",
    "clock",
    "cup",
    "fork",
    "keyboard",
    "knife",
    "laptop",
    "microwave",
    "mouse",
    "oven",
    "potted plant",
    "sink",
    "stop sign",
    "toilet",
    "tv",
];

/// Dense `h x w x dim` patch features, stored flattened as `(h*w) x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureMap {
    pub h: usize,
    pub w: usize,
    pub features: Tensor,
}

impl VisualFeatureMap {
    pub fn new(h: usize, w: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || dim == 0 {
            return Err(Error::Shape(format!("feature grid {h}x{w}x{dim}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite visual feature".into()));
        }
        Ok(Self {
            h,
            w,
            features: Tensor::new(vec![h * w, dim], data)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        self.features.row(row * self.w + col)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFeature {
    pub vector: Vec<f64>,
}

/// `(h*w) x d` fused visual/task features.
#[derive(Clone, Debug, PartialEq)]
pub struct JointConditioning {
    pub matrix: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureFile {
    Visual(VisualFeatureMap),
    Task(TaskFeature),
}

pub fn encode_feature_file(shape: &[usize], data: &[f64]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(data.len() * 4);
    for &v in data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(payload.len() + 32);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn write_visual(path: &Path, map: &VisualFeatureMap) -> Result<()> {
    let bytes = encode_feature_file(&[map.h, map.w, map.dim()], map.features.data());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_task(path: &Path, t: &TaskFeature) -> Result<()> {
    let bytes = encode_feature_file(&[t.vector.len()], &t.vector);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parse an `SDFT` buffer. Rank 3 is a visual map, rank 1 a task vector.
pub fn decode_feature_file(bytes: &[u8], path: &Path) -> Result<FeatureFile> {
    let fixed = 4 + 4 + 1;
    if bytes.len() < fixed || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing SDFT magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported feature version {version}")));
    }
    let rank = bytes[8] as usize;
    if rank != 1 && rank != 3 {
        return Err(Error::format(path, format!("unsupported rank {rank}")));
    }
    let header = fixed + 4 * rank + 4;
    if bytes.len() < header {
        return Err(Error::format(path, "truncated header"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| u32_at(fixed + 4 * i) as usize).collect();
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::format(path, format!("zero dimension in {dims:?}")));
    }
    let crc = u32_at(fixed + 4 * rank);
    let payload = &bytes[header..];
    let expected = dims.iter().product::<usize>() * 4;
    if payload.len() != expected {
        return Err(Error::integrity(
            path,
            format!("payload has {} bytes, shape {dims:?} needs {expected}", payload.len()),
        ));
    }
    if crc32fast::hash(payload) != crc {
        return Err(Error::integrity(path, "payload checksum mismatch"));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::integrity(path, "non-finite feature value"));
    }
    Ok(match rank {
        3 => FeatureFile::Visual(VisualFeatureMap::new(dims[0], dims[1], dims[2], data)?),
        _ => FeatureFile::Task(TaskFeature { vector: data }),
    })
}

pub fn load_features(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_file(&bytes, path)
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(width * height, pixels.len());
        Self { width, height, pixels }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, width: usize, height: usize) -> PixelGrid {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                pixels.push(self.at(sx, sy));
            }
        }
        PixelGrid::new(width, height, pixels)
    }
}

/// Seeded stand-in for a patch-based vision backbone.
///
/// Each `patch x patch` cell is flattened and multiplied by a fixed random
/// matrix; a fixed per-cell code is added so that features also carry the
/// cell's location. Images whose sides are not multiples of `patch` are
/// resized up to the next multiple first.
pub fn toy_encode(image: &PixelGrid, patch: usize, dim: usize, seed: u64) -> VisualFeatureMap {
    assert!(patch >= 1 && dim >= 1);
    let round_up = |n: usize| n.div_ceil(patch).max(1) * patch;
    let (w_px, h_px) = (round_up(image.width), round_up(image.height));
    let resized;
    let img = if (w_px, h_px) == (image.width, image.height) {
        image
    } else {
        resized = image.resize(w_px, h_px);
        &resized
    };
    let (gw, gh) = (w_px / patch, h_px / patch);
    let key = RngKey::new(seed).fork("toy-encoder");
    let mut rng = key.fork("projection").rng();
    let p2 = patch * patch;
    let scale = 1.0 / (p2 as f64).sqrt();
    let proj: Vec<f64> = (0..p2 * dim)
        .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z })
        .collect();
    let mut pos_rng = key.fork("position").rng();
    let pos: Vec<f64> = (0..gh * gw * dim)
        .map(|_| { let z: f64 = StandardNormal.sample(&mut pos_rng); 0.5 * z })
        .collect();

    let mut data = vec![0.0; gh * gw * dim];
    for cy in 0..gh {
        for cx in 0..gw {
            let cell = cy * gw + cx;
            let out = &mut data[cell * dim..(cell + 1) * dim];
            out.copy_from_slice(&pos[cell * dim..(cell + 1) * dim]);
            for py in 0..patch {
                for px in 0..patch {
                    let v = img.at(cx * patch + px, cy * patch + py);
                    if v == 0.0 {
                        continue;
                    }
                    let row = &proj[(py * patch + px) * dim..(py * patch + px + 1) * dim];
                    for (o, p) in out.iter_mut().zip(row) {
                        *o += v * p;
                    }
                }
            }
        }
    }
    VisualFeatureMap::new(gh, gw, dim, data).expect("toy features are finite")
}

/// Fixed random vectors for task strings.
///
/// The vocabulary is the empty string plus [`SEARCH_CATEGORIES`]; other
/// strings get a vector derived from their text the same way, so every task
/// string has a stable feature.
#[derive(Clone, Debug)]
pub struct TaskVocabulary {
    pub dim: usize,
    pub seed: u64,
}

impl TaskVocabulary {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn known() -> impl Iterator<Item = &'static str> {
        std::iter::once("").chain(SEARCH_CATEGORIES)
    }

    pub fn feature(&self, task: &str) -> TaskFeature {
        let mut rng = RngKey::new(self.seed).fork("task-vocabulary").fork(task).rng();
        let scale = 1.0 / (self.dim as f64).sqrt();
        TaskFeature {
            vector: (0..self.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    f64::from((z * scale) as f32)
                })
                .collect(),
        }
    }
}

/// Lookup of features for stimuli and tasks.
pub trait FeatureSource: Sync {
    fn visual(&self, stimulus_id: &str) -> Result<VisualFeatureMap>;
    fn task(&self, task: &str) -> Result<TaskFeature>;
}

#[derive(Clone, Debug, Default)]
pub struct InMemoryFeatures {
    pub visual: BTreeMap<String, VisualFeatureMap>,
    pub tasks: BTreeMap<String, TaskFeature>,
}

impl FeatureSource for InMemoryFeatures {
    fn visual(&self, stimulus_id: &str) -> Result<VisualFeatureMap> {
        self.visual
            .get(stimulus_id)
            .cloned()
            .ok_or_else(|| Error::MissingFeature(format!("stimulus {stimulus_id:?}")))
    }

    fn task(&self, task: &str) -> Result<TaskFeature> {
        self.tasks
            .get(task)
            .cloned()
            .ok_or_else(|| Error::MissingFeature(format!("task {task:?}")))
    }
}

/// File name stem used for a task string; free viewing gets a reserved name.
pub fn task_file_stem(task: &str) -> String {
    if task.is_empty() {
        "@free".to_string()
    } else {
        task.replace(['/', '\\'], "_")
    }
}

/// Feature directory: `<root>/<stimulus_id>.sdft` for stimuli and
/// `<root>/task/<task>.sdft` for tasks. Tasks without a file fall back to
/// the vocabulary when one is configured.
#[derive(Clone, Debug)]
pub struct FeatureDir {
    pub root: PathBuf,
    pub vocabulary: Option<TaskVocabulary>,
}

impl FeatureDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            vocabulary: None,
        }
    }

    pub fn visual_path(&self, stimulus_id: &str) -> PathBuf {
        self.root.join(format!("{stimulus_id}.sdft"))
    }

    pub fn task_path(&self, task: &str) -> PathBuf {
        self.root.join("task").join(format!("{}.sdft", task_file_stem(task)))
    }
}

impl FeatureSource for FeatureDir {
    fn visual(&self, stimulus_id: &str) -> Result<VisualFeatureMap> {
        let path = self.visual_path(stimulus_id);
        if !path.exists() {
            return Err(Error::MissingFeature(format!("stimulus {stimulus_id:?} ({})", path.display())));
        }
        match load_features(&path)? {
            FeatureFile::Visual(v) => Ok(v),
            FeatureFile::Task(_) => Err(Error::format(path, "expected a rank-3 visual feature map")),
        }
    }

    fn task(&self, task: &str) -> Result<TaskFeature> {
        let path = self.task_path(task);
        if path.exists() {
            return match load_features(&path)? {
                FeatureFile::Task(t) => Ok(t),
                FeatureFile::Visual(_) => Err(Error::format(path, "expected a rank-1 task vector")),
            };
        }
        self.vocabulary
            .as_ref()
            .map(|v| v.feature(task))
            .ok_or_else(|| Error::MissingFeature(format!("task {task:?} ({})", path.display())))
    }
}

/// The three affine maps that fuse visual and task features.
#[derive(Clone, Debug)]
pub struct ConditioningProjections {
    pub visual: Linear,
    pub task: Linear,
    pub joint: Linear,
}

impl ConditioningProjections {
    pub fn new(store: &mut ParamStore, visual_dim: usize, task_dim: usize, model_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            visual: Linear::new(store, "cond.visual", visual_dim, model_dim, Init::FanInUniform, rng),
            task: Linear::new(store, "cond.task", task_dim, model_dim, Init::FanInUniform, rng),
            joint: Linear::new(store, "cond.joint", 2 * model_dim, model_dim, Init::FanInUniform, rng),
        }
    }

    /// Record the fusion on `g`: project both modalities to `d`, tile the
    /// task row over all patches, concatenate to `hw x 2d`, project to `d`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, vmap: &VisualFeatureMap, task: &TaskFeature) -> Result<Var> {
        if vmap.dim() != self.visual.in_dim || task.vector.len() != self.task.in_dim {
            return Err(Error::Shape(format!(
                "conditioning expects visual width {} and task width {}, got {} and {}",
                self.visual.in_dim,
                self.task.in_dim,
                vmap.dim(),
                task.vector.len()
            )));
        }
        let v = g.input(vmap.features.clone());
        let t = g.input(Tensor::matrix(1, task.vector.len(), task.vector.clone()));
        let pv = self.visual.forward(g, store, v)?;
        let pt = self.task.forward(g, store, t)?;
        let pt = g.repeat_rows(pt, vmap.h * vmap.w)?;
        let cat = g.concat_cols(&[pv, pt])?;
        self.joint.forward(g, store, cat)
    }

    pub fn embed(&self, store: &ParamStore, vmap: &VisualFeatureMap, task: &TaskFeature) -> Result<JointConditioning> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, vmap, task)?;
        Ok(JointConditioning {
            matrix: g.value(out).clone(),
        })
    }
}

/// A plain affine map, `x · weight + bias` with `weight: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fuse features with explicit projection matrices.
pub fn joint_embed(vmap: &VisualFeatureMap, task: &TaskFeature, proj_v: &Affine, proj_t: &Affine, proj_joint: &Affine) -> Result<JointConditioning> {
    let d = proj_v.weight.cols();
    if proj_t.weight.cols() != d || proj_joint.weight.rows() != 2 * d || proj_joint.weight.cols() != d {
        return Err(Error::Shape(format!(
            "projections must map to a shared width d and 2d -> d; got {:?}, {:?}, {:?}",
            proj_v.weight.shape(),
            proj_t.weight.shape(),
            proj_joint.weight.shape()
        )));
    }
    let mut store = ParamStore::new();
    let mut linear = |name: &str, a: &Affine| Linear {
        in_dim: a.weight.rows(),
        out_dim: a.weight.cols(),
        weight: store.add(format!("{name}.weight"), a.weight.clone()),
        bias: store.add(format!("{name}.bias"), a.bias.clone()),
    };
    let proj = ConditioningProjections {
        visual: linear("v", proj_v),
        task: linear("t", proj_t),
        joint: linear("j", proj_joint),
    };
    proj.embed(&store, vmap, task)
}
