//! Optimization loop, checkpointing and synthetic experiment data.
//!
//! Step `k` (1-based) draws its batch from key `seed/"batch"/k` and the
//! per-item timestep, noise and dropout from `seed/"noise"/k/i`, so a run
//! resumed from a checkpoint follows the uninterrupted trajectory exactly.
//! Parameters and AdamW moments are rounded to `f32` after every update so
//! that the `f32` checkpoint holds the complete state.

pub mod config;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{FeatureSource, TaskFeature, VisualFeatureMap};
use crate::denoiser::Denoiser;
use crate::diffusion::{
    batch_losses, item_loss, mean_breakdown, sqrt_schedule, ItemDraw, LossBreakdown, NoiseSchedule, TimestepSampler,
    TrainingItem, SCHEDULE_OFFSET,
};
use crate::error::{Error, Result};
use crate::gaze::{pad_truncate, CorpusRecord};
use crate::numerics::checkpoint::quantize_f32;
use crate::numerics::optim::clip_grad_norm;
use crate::numerics::rng::normal_matrix;
use crate::numerics::{Checkpoint, RngKey};

pub use config::TrainConfig;
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticTaskSpec, TaskModes};

/// Points of the fixed timestep grid used for validation.
pub const VALIDATION_GRID: usize = 5;

const SAMPLER_HISTORY: &str = "sampler.history";
const SAMPLER_COUNTS: &str = "sampler.counts";

/// Resolve features for every record, sharing maps between records of the
/// same stimulus and task.
pub fn build_items(records: &[CorpusRecord], features: &dyn FeatureSource, max_len: usize) -> Result<Vec<TrainingItem>> {
    if records.is_empty() {
        return Err(Error::InsufficientScanpaths { needed: 1, got: 0 });
    }
    let mut visual: BTreeMap<&str, Arc<VisualFeatureMap>> = BTreeMap::new();
    let mut tasks: BTreeMap<&str, Arc<TaskFeature>> = BTreeMap::new();
    let mut items = Vec::with_capacity(records.len());
    for (line, r) in records.iter().enumerate() {
        let s = r
            .scanpath()
            .map_err(|e| Error::InvalidStimulus(format!("record {} ({}): {e}", line + 1, r.stimulus_id)))?;
        if !visual.contains_key(r.stimulus_id.as_str()) {
            visual.insert(&r.stimulus_id, Arc::new(features.visual(&r.stimulus_id)?));
        }
        if !tasks.contains_key(r.task.as_str()) {
            tasks.insert(&r.task, Arc::new(features.task(&r.task)?));
        }
        items.push(TrainingItem {
            scanpath: pad_truncate(&s, max_len),
            visual: visual[r.stimulus_id.as_str()].clone(),
            task: tasks[r.task.as_str()].clone(),
        });
    }
    let (vd, td) = (items[0].visual.dim(), items[0].task.vector.len());
    for (i, it) in items.iter().enumerate() {
        if it.visual.dim() != vd || it.task.vector.len() != td {
            return Err(Error::Shape(format!(
                "record {}: feature widths ({}, {}) differ from the first record's ({vd}, {td})",
                i + 1,
                it.visual.dim(),
                it.task.vector.len()
            )));
        }
    }
    Ok(items)
}

/// Split records into (train, validation) by a seeded shuffle.
pub fn split_records(records: &[CorpusRecord], fraction: f64, seed: u64) -> (Vec<CorpusRecord>, Vec<CorpusRecord>) {
    let n_val = (records.len() as f64 * fraction).round() as usize;
    if n_val == 0 || n_val >= records.len() {
        return (records.to_vec(), Vec::new());
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut RngKey::new(seed).fork("split").rng());
    let (val, train) = order.split_at(n_val);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| records[i].clone()).collect()
    };
    (pick(train), pick(val))
}

/// Mean `L_rec` over `items` and a fixed timestep grid with fixed noise.
pub fn validation_rec(model: &Denoiser, schedule: &NoiseSchedule, items: &[TrainingItem], seed: u64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let steps = schedule.steps;
    let grid: Vec<usize> = (0..VALIDATION_GRID)
        .map(|k| (1 + k * (steps - 1) / (VALIDATION_GRID - 1)).clamp(1, steps))
        .collect();
    let key = RngKey::new(seed).fork("validation");
    let cfg = &model.config;
    let work: Vec<(usize, usize)> = (0..items.len()).flat_map(|i| grid.iter().map(move |&t| (i, t))).collect();
    let recs: Vec<f64> = work
        .par_iter()
        .map(|&(i, t)| {
            let draw = ItemDraw {
                t,
                weight: 1.0,
                noise: normal_matrix(&mut key.at(i as u64).at(t as u64).rng(), cfg.max_len, cfg.model_dim),
                dropout: None,
            };
            Ok(item_loss(model, schedule, &items[i], &draw, true, false)?.loss.rec)
        })
        .collect::<Result<_>>()?;
    Ok(recs.iter().sum::<f64>() / recs.len() as f64)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub vlb: f64,
    pub rec: f64,
    pub val: f64,
    pub prior: f64,
    pub total: f64,
    pub val_rec: f64,
}

/// Outcome of [`Trainer::run`].
#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    /// Batch-mean losses of every step run, in order.
    pub history: Vec<LossBreakdown>,
    pub log: Vec<LogRecord>,
    pub final_step: u64,
    pub stopped_early: bool,
}

impl TrainSummary {
    pub fn last_val_rec(&self) -> Option<f64> {
        self.log.last().map(|r| r.val_rec)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    pub sampler: TimestepSampler,
    /// Completed optimizer steps.
    pub step: u64,
    train: Vec<TrainingItem>,
    validation: Vec<TrainingItem>,
}

fn quantize_state(model: &mut Denoiser) {
    for p in model.store.iter_mut() {
        quantize_f32(&mut p.value);
        quantize_f32(&mut p.m);
        quantize_f32(&mut p.v);
    }
}

impl Trainer {
    /// Fresh model; feature widths are taken from the data.
    pub fn new(config: TrainConfig, train: Vec<TrainingItem>, validation: Vec<TrainingItem>) -> Result<Self> {
        config.validate()?;
        let first = train.first().ok_or(Error::EmptyBatch)?;
        let dcfg = config.denoiser(first.visual.dim(), first.task.vector.len());
        let mut model = Denoiser::new(dcfg, config.seed)?;
        quantize_state(&mut model);
        Self::assemble(config, model, TimestepSampler::new(0), 0, train, validation)
    }

    fn assemble(
        config: TrainConfig,
        model: Denoiser,
        sampler: TimestepSampler,
        step: u64,
        train: Vec<TrainingItem>,
        validation: Vec<TrainingItem>,
    ) -> Result<Self> {
        let schedule = sqrt_schedule(config.diffusion_steps, SCHEDULE_OFFSET)?;
        let sampler = if sampler.steps == 0 {
            TimestepSampler::new(config.diffusion_steps)
        } else {
            sampler
        };
        let (vd, td) = (model.config.visual_dim, model.config.task_dim);
        for it in train.iter().chain(&validation) {
            if it.visual.dim() != vd || it.task.vector.len() != td {
                return Err(Error::Shape(format!(
                    "features of width ({}, {}) do not match the model's ({vd}, {td})",
                    it.visual.dim(),
                    it.task.vector.len()
                )));
            }
            if it.scanpath.max_len != config.max_len {
                return Err(Error::Shape(format!("scanpath padded to {} instead of {}", it.scanpath.max_len, config.max_len)));
            }
        }
        Ok(Self {
            config,
            model,
            schedule,
            sampler,
            step,
            train,
            validation,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::to_checkpoint`].
    /// `config` may differ from the stored one only in `max_steps` and
    /// `target_rec`.
    pub fn resume(
        ckpt: &Checkpoint,
        path: &Path,
        config: TrainConfig,
        train: Vec<TrainingItem>,
        validation: Vec<TrainingItem>,
    ) -> Result<Self> {
        let stored = ckpt
            .header_value("train.config")
            .ok_or_else(|| Error::format(path, "not a training checkpoint (no train.config)"))?;
        let stored = TrainConfig::from_json(stored, path)?;
        if !stored.resumable_as(&config) {
            return Err(Error::Config(format!(
                "{} was written with a different configuration",
                path.display()
            )));
        }
        let step: u64 = ckpt
            .header_value("train.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "missing or bad train.step"))?;
        let mut model = Denoiser::from_checkpoint(ckpt, path)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let p = model.store.get_mut(id);
            for (prefix, slot) in [("adam.m.", &mut p.m), ("adam.v.", &mut p.v)] {
                let name = format!("{prefix}{}", p.name);
                let t = ckpt.tensor(&name).ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::format(path, format!("tensor {name} has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        let tensor = |n: &str| ckpt.tensor(n).ok_or_else(|| Error::format(path, format!("missing tensor {n}")));
        let sampler = TimestepSampler::from_tensors(tensor(SAMPLER_HISTORY)?, tensor(SAMPLER_COUNTS)?)
            .map_err(|e| Error::format(path, e.to_string()))?;
        if sampler.steps != config.diffusion_steps {
            return Err(Error::format(path, "sampler history does not match T"));
        }
        Self::assemble(config, model, sampler, step, train, validation)
    }

    /// The stored config records the steps completed as its budget and no
    /// early-stop target, so a checkpoint depends only on the training state
    /// and not on the budget of the invocation that wrote it.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let stored = TrainConfig {
            max_steps: self.step.max(1),
            target_rec: None,
            ..self.config.clone()
        };
        let mut ckpt = self.model.to_checkpoint();
        ckpt.header.push(("train.step".into(), self.step.to_string()));
        ckpt.header.push(("train.seed".into(), self.config.seed.to_string()));
        ckpt.header.push(("train.config".into(), stored.to_json()));
        for p in self.model.store.iter() {
            ckpt.tensors.push((format!("adam.m.{}", p.name), p.m.clone()));
            ckpt.tensors.push((format!("adam.v.{}", p.name), p.v.clone()));
        }
        let (h, c) = self.sampler.to_tensors();
        ckpt.tensors.push((SAMPLER_HISTORY.into(), h));
        ckpt.tensors.push((SAMPLER_COUNTS.into(), c));
        ckpt
    }

    fn batch(&self, step: u64) -> Vec<TrainingItem> {
        let mut rng = RngKey::new(self.config.seed).fork("batch").at(step).rng();
        (0..self.config.batch_size)
            .map(|_| self.train[rng.random_range(0..self.train.len())].clone())
            .collect()
    }

    /// Run one optimizer step and return the batch-mean losses.
    pub fn step_once(&mut self) -> Result<LossBreakdown> {
        let step = self.step + 1;
        let batch = self.batch(step);
        let key = RngKey::new(self.config.seed).fork("noise").at(step);
        let results = batch_losses(
            &self.model,
            &self.schedule,
            &self.sampler,
            &batch,
            key,
            self.config.use_prior_loss,
            true,
        )
        .map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
            e => e,
        })?;
        let scale = 1.0 / results.len() as f64;
        self.model.store.zero_grad();
        for r in &results {
            self.model.store.accumulate(r.grads.as_ref().expect("training results carry gradients"), scale);
        }
        if let Some(c) = self.config.clip_norm {
            clip_grad_norm(&mut self.model.store, c);
        }
        self.config.optimizer().step(&mut self.model.store, step);
        quantize_state(&mut self.model);
        if self.model.store.iter().any(|p| !p.value.is_finite()) {
            return Err(Error::Numerical(format!("step {step}: non-finite parameters after update")));
        }
        for r in &results {
            self.sampler.record(r.t, r.raw_vlb);
        }
        self.step = step;
        Ok(mean_breakdown(&results))
    }

    /// Items validation runs on: the held-out split, or the training set.
    pub fn validation_items(&self) -> &[TrainingItem] {
        if self.validation.is_empty() {
            &self.train
        } else {
            &self.validation
        }
    }

    pub fn validation_rec(&self) -> Result<f64> {
        validation_rec(&self.model, &self.schedule, self.validation_items(), self.config.seed)
    }

    /// Train until `max_steps` or the early-stop target. With `out`, the log
    /// goes to `out/train.jsonl` and checkpoints to `out/`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainSummary> {
        let mut summary = TrainSummary::default();
        let mut log = match out {
            Some(dir) => Some(TrainLog::open(dir, self.step)?),
            None => None,
        };
        while self.step < self.config.max_steps {
            let loss = self.step_once()?;
            summary.history.push(loss);
            let step = self.step;
            let is_last = step == self.config.max_steps;
            if step % self.config.eval_every == 0 || is_last {
                let val_rec = self.validation_rec()?;
                let rec = LogRecord {
                    step,
                    vlb: loss.vlb,
                    rec: loss.rec,
                    val: loss.val,
                    prior: loss.prior,
                    total: loss.total,
                    val_rec,
                };
                log::info!(
                    "step {step}: total {:.5} vlb {:.5} rec {:.5} val {:.5} prior {:.5} val_rec {:.5}",
                    rec.total,
                    rec.vlb,
                    rec.rec,
                    rec.val,
                    rec.prior,
                    rec.val_rec
                );
                if let Some(l) = log.as_mut() {
                    l.append(&rec)?;
                }
                summary.log.push(rec);
                if self.config.target_rec.is_some_and(|t| val_rec < t) {
                    summary.stopped_early = true;
                }
            }
            if let Some(dir) = out {
                let periodic = self.config.checkpoint_every.is_some_and(|k| step % k == 0);
                if periodic || is_last || summary.stopped_early {
                    let ckpt = self.to_checkpoint();
                    if periodic {
                        ckpt.save(&dir.join(format!("step-{step}.sdkp")))?;
                    }
                    ckpt.save(&dir.join("last.sdkp"))?;
                }
            }
            if summary.stopped_early {
                break;
            }
        }
        summary.final_step = self.step;
        Ok(summary)
    }
}

/// Append-only JSON-lines log that drops records past the resume point.
struct TrainLog {
    path: PathBuf,
}

impl TrainLog {
    fn open(dir: &Path, step: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train.jsonl");
        let mut kept = String::new();
        if step > 0 && path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for (i, line) in text.lines().enumerate() {
                let r: LogRecord = serde_json::from_str(line)
                    .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
                if r.step <= step {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }

    fn append(&mut self, r: &LogRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let line = serde_json::to_string(r).expect("log record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Visual and task feature widths of a training set.
pub fn feature_dims(items: &[TrainingItem]) -> Option<(usize, usize)> {
    items.first().map(|i| (i.visual.dim(), i.task.vector.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::synthetic::SyntheticTaskSpec;

    fn tiny() -> (TrainConfig, Vec<TrainingItem>) {
        let corpus = generate_synthetic_corpus(&SyntheticTaskSpec::overfit(), 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            diffusion_steps: 20,
            max_steps: 6,
            eval_every: 3,
            ..TrainConfig::toy()
        };
        let items = build_items(&corpus.records, &corpus.features, cfg.max_len).unwrap();
        (cfg, items)
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, items) = tiny();
        let mut full = Trainer::new(cfg.clone(), items.clone(), Vec::new()).unwrap();
        full.run(None).unwrap();

        let mut first = Trainer::new(TrainConfig { max_steps: 3, ..cfg.clone() }, items.clone(), Vec::new()).unwrap();
        first.run(None).unwrap();
        let bytes = first.to_checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let mut second = Trainer::resume(&ckpt, Path::new("mem"), cfg, items, Vec::new()).unwrap();
        assert_eq!(second.step, 3);
        second.run(None).unwrap();
        assert_eq!(second.to_checkpoint().to_bytes(), full.to_checkpoint().to_bytes());
    }

    #[test]
    fn checkpoint_does_not_depend_on_the_budget() {
        let (cfg, items) = tiny();
        let mut short = Trainer::new(TrainConfig { max_steps: 2, ..cfg.clone() }, items.clone(), Vec::new()).unwrap();
        let mut long = Trainer::new(TrainConfig { max_steps: 50, target_rec: Some(0.1), ..cfg }, items, Vec::new()).unwrap();
        for _ in 0..2 {
            short.step_once().unwrap();
            long.step_once().unwrap();
        }
        assert_eq!(short.to_checkpoint().to_bytes(), long.to_checkpoint().to_bytes());
    }

    #[test]
    fn prior_switch_zeroes_the_term() {
        let (cfg, items) = tiny();
        let mut t = Trainer::new(TrainConfig { use_prior_loss: false, ..cfg }, items, Vec::new()).unwrap();
        let s = t.run(None).unwrap();
        assert_eq!(s.history.len(), 6);
        assert!(s.history.iter().all(|l| l.prior == 0.0 && l.total.is_finite()));
        assert_eq!(s.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![3, 6]);
    }

    #[test]
    fn resume_rejects_other_config() {
        let (cfg, items) = tiny();
        let t = Trainer::new(cfg.clone(), items.clone(), Vec::new()).unwrap();
        let ckpt = t.to_checkpoint();
        let other = TrainConfig { lr: 0.5, ..cfg };
        assert!(matches!(
            Trainer::resume(&ckpt, Path::new("c"), other, items, Vec::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_feature_names_the_stimulus() {
        let corpus = generate_synthetic_corpus(&SyntheticTaskSpec::overfit(), 0).unwrap();
        let mut features = corpus.features.clone();
        features.visual.remove("stim-003");
        let err = build_items(&corpus.records, &features, 8).unwrap_err();
        assert!(matches!(&err, Error::MissingFeature(m) if m.contains("stim-003")), "{err}");
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let corpus = generate_synthetic_corpus(&SyntheticTaskSpec::variable_length(), 0).unwrap();
        let (a, b) = split_records(&corpus.records, 0.25, 9);
        assert_eq!((a.len(), b.len()), (18, 6));
        assert_eq!(split_records(&corpus.records, 0.25, 9), (a.clone(), b.clone()));
        assert!(b.iter().all(|r| !a.contains(r)));
    }
}
