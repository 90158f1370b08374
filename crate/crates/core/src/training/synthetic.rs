//! Synthetic scanpath corpora with known mode structure.
//!
//! Every observer of a task visits the task's mode centres in turn, either
//! in the listed order or reversed, with Gaussian jitter around each centre.
//! Each stimulus gets an image with a blob on every centre (and, when the
//! length is a property of the stimulus, a bar whose width encodes it),
//! encoded by the toy encoder, so the features tell the model where to look.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{toy_encode, write_task, write_visual, FeatureDir, InMemoryFeatures, PixelGrid, TaskVocabulary};
use crate::error::{Error, Result};
use crate::gaze::{write_corpus, CorpusRecord, Scanpath, SegmentationMap};
use crate::metrics::segmap::write_segmap;
use crate::numerics::RngKey;

/// Mode centres of one task, visited in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskModes {
    pub task: String,
    pub centers: Vec<[f64; 2]>,
}

/// Pixel frame and feature layout of the rendered stimuli.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    pub width_px: u32,
    pub height_px: u32,
    /// Side of the square image fed to the toy encoder.
    pub image_size: usize,
    pub patch: usize,
    pub visual_dim: usize,
    pub task_dim: usize,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            width_px: 512,
            height_px: 512,
            image_size: 32,
            patch: 8,
            visual_dim: 32,
            task_dim: 16,
        }
    }
}

fn default_stimuli() -> usize {
    1
}

fn default_duration() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub tasks: Vec<TaskModes>,
    /// Standard deviation of positions around each centre, normalized units.
    pub jitter: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub observers: usize,
    #[serde(default = "default_stimuli")]
    pub stimuli: usize,
    /// Probability that a scanpath visits the centres in reverse order.
    #[serde(default)]
    pub reverse_fraction: f64,
    /// Each stimulus moves all centres by an offset uniform in
    /// `[-stimulus_shift, stimulus_shift]` per axis.
    #[serde(default)]
    pub stimulus_shift: f64,
    /// Draw one length per stimulus instead of one per scanpath.
    #[serde(default)]
    pub length_per_stimulus: bool,
    /// Mean fixation duration, seconds.
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default)]
    pub duration_jitter: f64,
    /// Longest scanpath the model will see.
    pub max_model_len: usize,
    #[serde(default)]
    pub render: RenderSpec,
}

/// Radius of the labelled disc around each centre in segmentation maps.
pub const SEGMENT_RADIUS: f64 = 0.08;
/// Side of the generated segmentation rasters.
const SEGMAP_SIZE: usize = 128;
/// Blob radius in image pixels.
const BLOB_SIGMA_PX: f64 = 1.0;
/// Shortest synthetic duration, seconds.
const MIN_SYNTH_DURATION: f64 = 0.05;

impl SyntheticTaskSpec {
    /// Eight distinct single-observer scanpaths: one per stimulus.
    pub fn overfit() -> Self {
        Self {
            tasks: vec![TaskModes {
                task: String::new(),
                centers: vec![[0.2, 0.25], [0.75, 0.3], [0.7, 0.75], [0.3, 0.7]],
            }],
            jitter: 0.0,
            min_len: 4,
            max_len: 6,
            observers: 1,
            stimuli: 8,
            reverse_fraction: 0.0,
            stimulus_shift: 0.15,
            length_per_stimulus: true,
            duration: 0.25,
            duration_jitter: 0.0,
            max_model_len: 8,
            render: RenderSpec::default(),
        }
    }

    /// One stimulus whose observers split between two visiting orders.
    pub fn two_mode() -> Self {
        Self {
            tasks: vec![TaskModes {
                task: String::new(),
                centers: vec![[0.2, 0.2], [0.8, 0.2], [0.8, 0.8], [0.2, 0.8]],
            }],
            jitter: 0.02,
            min_len: 4,
            max_len: 4,
            observers: 40,
            stimuli: 1,
            reverse_fraction: 0.5,
            stimulus_shift: 0.0,
            length_per_stimulus: false,
            duration: 0.25,
            duration_jitter: 0.0,
            max_model_len: 8,
            render: RenderSpec::default(),
        }
    }

    /// Lengths 3 to 8, one per stimulus.
    pub fn variable_length() -> Self {
        Self {
            tasks: vec![TaskModes {
                task: String::new(),
                centers: vec![[0.2, 0.2], [0.8, 0.25], [0.75, 0.8], [0.25, 0.75]],
            }],
            jitter: 0.01,
            min_len: 3,
            max_len: 8,
            observers: 2,
            stimuli: 12,
            reverse_fraction: 0.0,
            stimulus_shift: 0.1,
            length_per_stimulus: true,
            duration: 0.25,
            duration_jitter: 0.0,
            max_model_len: 8,
            render: RenderSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() || self.tasks.iter().any(|t| t.centers.is_empty()) {
            return bad("every task needs at least one centre".into());
        }
        for t in &self.tasks {
            if self.tasks.iter().filter(|u| u.task == t.task).count() > 1 {
                return bad(format!("task {:?} listed twice", t.task));
            }
            if t.centers.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(format!("centres of task {:?} must lie in [0, 1]", t.task));
            }
        }
        if !(1 <= self.min_len && self.min_len <= self.max_len && self.max_len <= self.max_model_len) {
            return bad(format!(
                "lengths need 1 <= min_len ({}) <= max_len ({}) <= max_model_len ({})",
                self.min_len, self.max_len, self.max_model_len
            ));
        }
        if self.observers == 0 || self.stimuli == 0 {
            return bad("observers and stimuli must be positive".into());
        }
        for (name, v) in [
            ("jitter", self.jitter),
            ("stimulus_shift", self.stimulus_shift),
            ("duration_jitter", self.duration_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative"));
            }
        }
        if !(0.0..=1.0).contains(&self.reverse_fraction) {
            return bad("reverse_fraction must be in [0, 1]".into());
        }
        if !(self.duration > 0.0) {
            return bad("duration must be positive".into());
        }
        let r = &self.render;
        if r.width_px == 0 || r.height_px == 0 || r.image_size == 0 || r.patch == 0 || r.visual_dim == 0 || r.task_dim == 0 {
            return bad("render sizes must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, format!("line {}: {e}", e.line())))?;
        spec.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(spec)
    }
}

pub fn stimulus_id(index: usize) -> String {
    format!("stim-{index:03}")
}

/// A generated corpus with everything needed to train and evaluate on it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub records: Vec<CorpusRecord>,
    pub features: InMemoryFeatures,
    pub segmaps: BTreeMap<String, SegmentationMap>,
    /// Centres per (stimulus, task) after the stimulus shift.
    pub centers: BTreeMap<(String, String), Vec<[f64; 2]>>,
    /// Whether each record visits its centres in reverse.
    pub reversed: Vec<bool>,
}

impl SyntheticCorpus {
    pub fn scanpaths(&self) -> Result<Vec<Scanpath>> {
        self.records.iter().map(CorpusRecord::scanpath).collect()
    }

    /// Write `corpus.jsonl`, `features/` and `segmaps/` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let features = FeatureDir::new(dir.join("features"));
        let segdir = dir.join("segmaps");
        for d in [&features.root, &features.root.join("task"), &segdir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        write_corpus(&dir.join("corpus.jsonl"), &self.records)?;
        for (id, v) in &self.features.visual {
            write_visual(&features.visual_path(id), v)?;
        }
        for (task, t) in &self.features.tasks {
            write_task(&features.task_path(task), t)?;
        }
        for (id, m) in &self.segmaps {
            write_segmap(&segdir.join(format!("{id}.sdsg")), m)?;
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn centre_index(i: usize, k: usize, reverse: bool) -> usize {
    if reverse {
        k - 1 - i % k
    } else {
        i % k
    }
}

fn render(spec: &SyntheticTaskSpec, centers: &[[f64; 2]], length: Option<usize>) -> PixelGrid {
    let n = spec.render.image_size;
    let mut px = vec![0.0; n * n];
    for c in centers {
        let (cx, cy) = (c[0] * n as f64, c[1] * n as f64);
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let v = (-d2 / (2.0 * BLOB_SIGMA_PX * BLOB_SIGMA_PX)).exp();
                px[y * n + x] = f64::max(px[y * n + x], v);
            }
        }
    }
    if let Some(len) = length {
        let filled = (len * n).div_ceil(spec.max_model_len);
        for x in 0..filled.min(n) {
            px[(n - 1) * n + x] = 1.0;
        }
    }
    PixelGrid::new(n, n, px)
}

fn segmentation(centers: &[Vec<[f64; 2]>]) -> Result<SegmentationMap> {
    let (w, h) = (SEGMAP_SIZE, SEGMAP_SIZE);
    let mut labels = vec![0u16; w * h];
    let all: Vec<[f64; 2]> = centers.iter().flatten().copied().collect();
    for y in 0..h {
        for x in 0..w {
            let p = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let hit = all
                .iter()
                .enumerate()
                .map(|(i, c)| (i, (c[0] - p.0).hypot(c[1] - p.1)))
                .filter(|&(_, d)| d <= SEGMENT_RADIUS)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = hit {
                labels[y * w + x] = (i + 1) as u16;
            }
        }
    }
    SegmentationMap::new(w, h, labels)
}

/// Generate the corpus; identical `(spec, seed)` give identical output.
pub fn generate_synthetic_corpus(spec: &SyntheticTaskSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let key = RngKey::new(seed).fork("synthetic");
    let r = &spec.render;
    let vocab = TaskVocabulary::new(r.task_dim, seed);
    let encoder_seed = key.fork("encoder").raw();
    let (w, h) = (f64::from(r.width_px), f64::from(r.height_px));

    let mut out = SyntheticCorpus {
        records: Vec::new(),
        features: InMemoryFeatures::default(),
        segmaps: BTreeMap::new(),
        centers: BTreeMap::new(),
        reversed: Vec::new(),
    };
    for t in &spec.tasks {
        out.features.tasks.insert(t.task.clone(), vocab.feature(&t.task));
    }
    for s in 0..spec.stimuli {
        let id = stimulus_id(s);
        let skey = key.fork("stimulus").at(s as u64);
        let mut srng = skey.fork("layout").rng();
        let shift = [
            srng.random_range(-1.0..=1.0) * spec.stimulus_shift,
            srng.random_range(-1.0..=1.0) * spec.stimulus_shift,
        ];
        let stim_len = spec
            .length_per_stimulus
            .then(|| srng.random_range(spec.min_len..=spec.max_len));
        let shifted: Vec<Vec<[f64; 2]>> = spec
            .tasks
            .iter()
            .map(|t| {
                t.centers
                    .iter()
                    .map(|c| [(c[0] + shift[0]).clamp(0.0, 1.0), (c[1] + shift[1]).clamp(0.0, 1.0)])
                    .collect()
            })
            .collect();
        let all: Vec<[f64; 2]> = shifted.iter().flatten().copied().collect();
        let image = render(spec, &all, stim_len);
        out.features.visual.insert(id.clone(), toy_encode(&image, r.patch, r.visual_dim, encoder_seed));
        out.segmaps.insert(id.clone(), segmentation(&shifted)?);

        for (ti, task) in spec.tasks.iter().enumerate() {
            let centers = &shifted[ti];
            out.centers.insert((id.clone(), task.task.clone()), centers.clone());
            for o in 0..spec.observers {
                let mut rng = skey.fork("task").at(ti as u64).fork("observer").at(o as u64).rng();
                let len = stim_len.unwrap_or_else(|| rng.random_range(spec.min_len..=spec.max_len));
                let reverse = rng.random::<f64>() < spec.reverse_fraction;
                let fixations: Vec<[f64; 3]> = (0..len)
                    .map(|i| {
                        let c = centers[centre_index(i, centers.len(), reverse)];
                        let x = (c[0] + spec.jitter * normal(&mut rng)).clamp(0.0, 1.0);
                        let y = (c[1] + spec.jitter * normal(&mut rng)).clamp(0.0, 1.0);
                        let d = (spec.duration + spec.duration_jitter * normal(&mut rng)).max(MIN_SYNTH_DURATION);
                        [x * w, y * h, d]
                    })
                    .collect();
                out.records.push(CorpusRecord {
                    stimulus_id: id.clone(),
                    task: task.task.clone(),
                    subject_id: format!("obs-{o:03}"),
                    fixations,
                    width_px: r.width_px,
                    height_px: r.height_px,
                });
                out.reversed.push(reverse);
            }
        }
    }
    Ok(out)
}

/// Positions of the scanpath a noiseless observer would produce.
pub fn prototype(centers: &[[f64; 2]], len: usize, reverse: bool) -> Vec<(f64, f64)> {
    (0..len)
        .map(|i| {
            let c = centers[centre_index(i, centers.len(), reverse)];
            (c[0], c[1])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::diversity::within_ss;
    use crate::metrics::sequence::DEFAULT_BANDWIDTH;
    use crate::metrics::{meanshift_clusters, sequence_score};

    fn two_task_spec(jitter: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            tasks: vec![
                TaskModes {
                    task: "cup".into(),
                    centers: vec![[0.2, 0.2], [0.8, 0.2]],
                },
                TaskModes {
                    task: "bowl".into(),
                    centers: vec![[0.2, 0.8], [0.8, 0.8]],
                },
            ],
            jitter,
            min_len: 4,
            max_len: 4,
            observers: 10,
            stimuli: 1,
            ..SyntheticTaskSpec::two_mode()
        }
    }

    fn by_task(c: &SyntheticCorpus, task: &str) -> Vec<Scanpath> {
        c.scanpaths().unwrap().into_iter().filter(|s| s.task == task).collect()
    }

    #[test]
    fn deterministic_and_valid() {
        let spec = SyntheticTaskSpec::variable_length();
        let a = generate_synthetic_corpus(&spec, 3).unwrap();
        let b = generate_synthetic_corpus(&spec, 3).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.features.visual, b.features.visual);
        assert_ne!(a.records, generate_synthetic_corpus(&spec, 4).unwrap().records);
        assert_eq!(a.records.len(), spec.stimuli * spec.observers);
        for s in a.scanpaths().unwrap() {
            assert!((3..=8).contains(&s.len()));
        }
    }

    #[test]
    fn two_modes_are_consistent_within_a_task() {
        let c = generate_synthetic_corpus(&{ SyntheticTaskSpec { reverse_fraction: 0.0, ..two_task_spec(0.02) } }, 1).unwrap();
        let all = c.scanpaths().unwrap();
        let pts: Vec<(f64, f64)> = all.iter().flat_map(|s| s.points()).collect();
        let clusters = meanshift_clusters(&pts, DEFAULT_BANDWIDTH).unwrap();
        for task in ["cup", "bowl"] {
            assert!(within_ss(&by_task(&c, task), &clusters).unwrap() > 0.6);
        }
        let cross: f64 = by_task(&c, "cup")
            .iter()
            .flat_map(|a| by_task(&c, "bowl").into_iter().map(move |b| (a.clone(), b)))
            .map(|(a, b)| sequence_score(&a, &b, &clusters, false).unwrap())
            .sum::<f64>()
            / 100.0;
        assert!(cross < 0.05, "{cross}");
    }

    #[test]
    fn zero_jitter_gives_identical_observers() {
        let c = generate_synthetic_corpus(&SyntheticTaskSpec { reverse_fraction: 0.0, ..two_task_spec(0.0) }, 5).unwrap();
        let cup = by_task(&c, "cup");
        assert!(cup.iter().all(|s| s.fixations == cup[0].fixations));
        let pts: Vec<(f64, f64)> = cup.iter().flat_map(|s| s.points()).collect();
        let clusters = meanshift_clusters(&pts, 0.1).unwrap();
        assert_eq!(within_ss(&cup, &clusters).unwrap(), 1.0);
    }

    #[test]
    fn reverse_order_and_prototypes() {
        let c = generate_synthetic_corpus(&SyntheticTaskSpec::two_mode(), 2).unwrap();
        let n_rev = c.reversed.iter().filter(|&&r| r).count();
        assert!(n_rev > 5 && n_rev < 35, "{n_rev}");
        let centers = &c.centers[&(stimulus_id(0), String::new())];
        let rev = prototype(centers, 4, true);
        assert_eq!(rev[0], (0.2, 0.8));
        assert_eq!(prototype(centers, 5, false)[4], (0.2, 0.2));
    }

    #[test]
    fn spec_validation() {
        let ok = SyntheticTaskSpec::overfit();
        ok.validate().unwrap();
        assert!(SyntheticTaskSpec { max_len: 9, ..ok.clone() }.validate().is_err());
        assert!(SyntheticTaskSpec { min_len: 0, ..ok.clone() }.validate().is_err());
        let mut off = ok.clone();
        off.tasks[0].centers.push([1.2, 0.0]);
        assert!(off.validate().is_err());
        let json = serde_json::to_string(&ok).unwrap();
        assert_eq!(serde_json::from_str::<SyntheticTaskSpec>(&json).unwrap(), ok);
    }
}
