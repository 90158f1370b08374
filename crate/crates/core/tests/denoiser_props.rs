use std::sync::Arc;

use gazediff::conditioning::{JointConditioning, TaskFeature, TaskVocabulary, VisualFeatureMap};
use gazediff::denoiser::{Denoiser, DenoiserConfig, LatentSequence};
use gazediff::diffusion::{item_loss, sqrt_schedule, ItemDraw, TimestepSampler, TrainingItem, SCHEDULE_OFFSET};
use gazediff::gaze::{pad_truncate, Fixation, Scanpath};
use gazediff::numerics::rng::normal_matrix;
use gazediff::numerics::RngKey;
use gazediff::training::{build_items, generate_synthetic_corpus, SyntheticTaskSpec, TrainConfig, Trainer};
use proptest::prelude::*;
use rand::Rng;

fn configs() -> impl Strategy<Value = DenoiserConfig> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..7, 2usize..30, 1usize..6, 1usize..5).prop_map(
        |(layers, heads, half_head, max_len, steps, visual_dim, task_dim)| {
            let model_dim = 2 * heads * half_head;
            DenoiserConfig {
                layers,
                heads,
                model_dim,
                ffn_dim: 2 * model_dim,
                max_len,
                steps,
                visual_dim,
                task_dim,
                dropout: 0.0,
            }
        },
    )
}

fn random_item(cfg: &DenoiserConfig, rng: &mut impl Rng) -> TrainingItem {
    let n = rng.random_range(1..=cfg.max_len);
    let fixations = (0..n).map(|_| Fixation::new(rng.random(), rng.random(), rng.random_range(0.1..0.5))).collect();
    let (h, w) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
    TrainingItem {
        scanpath: pad_truncate(&Scanpath::new(fixations, "s", ""), cfg.max_len),
        visual: Arc::new(VisualFeatureMap::new(h, w, cfg.visual_dim, normal_matrix(rng, h * w, cfg.visual_dim).into_data()).unwrap()),
        task: Arc::new(TaskFeature {
            vector: normal_matrix(rng, 1, cfg.task_dim).into_data(),
        }),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn forward_and_reconstruct_keep_the_row_structure(cfg in configs(), seed in any::<u64>(), rows in 1usize..6) {
        let model = Denoiser::new(cfg.clone(), seed).unwrap();
        let mut rng = RngKey::new(seed).fork("inputs").rng();
        let t = rng.random_range(1..=cfg.steps);
        let z = LatentSequence {
            matrix: normal_matrix(&mut rng, cfg.max_len, cfg.model_dim),
            timestep: t,
        };
        let cond = JointConditioning {
            matrix: normal_matrix(&mut rng, rows, cfg.model_dim),
        };
        let out = model.forward(&z, &cond).unwrap();
        prop_assert_eq!(out.shape(), &[cfg.max_len, cfg.model_dim][..]);
        let rec = model.reconstruct(&out).unwrap();
        prop_assert_eq!(rec.scanpath.shape(), &[cfg.max_len, 3][..]);
        prop_assert_eq!(rec.validity.len(), cfg.max_len);
        prop_assert!(rec.validity.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = DenoiserConfig::toy();
    let mut model = Denoiser::new(cfg.clone(), 3).unwrap();
    let schedule = sqrt_schedule(cfg.steps, SCHEDULE_OFFSET).unwrap();
    let sampler = TimestepSampler::new(cfg.steps);
    let mut rng = RngKey::new(3).fork("batch").rng();
    let batch: Vec<TrainingItem> = (0..4).map(|_| random_item(&cfg, &mut rng)).collect();
    let results: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let draw = ItemDraw::new(&model, &sampler, RngKey::new(3).at(i as u64), false);
            item_loss(&model, &schedule, it, &draw, true, true).unwrap()
        })
        .collect();
    assert!(results.iter().all(|r| r.loss.total > 0.0));
    model.store.zero_grad();
    for r in &results {
        model.store.accumulate(r.grads.as_ref().unwrap(), 1.0);
    }
    for p in model.store.iter() {
        assert!(p.grad.data().iter().any(|&g| g != 0.0), "{} has an all-zero gradient", p.name);
    }
}

#[test]
fn task_feature_changes_the_prediction_of_a_trained_model() {
    let corpus = generate_synthetic_corpus(&SyntheticTaskSpec::overfit(), 0).unwrap();
    let config = TrainConfig {
        max_steps: 300,
        eval_every: 300,
        ..TrainConfig::toy()
    };
    let items = build_items(&corpus.records, &corpus.features, config.max_len).unwrap();
    let mut trainer = Trainer::new(config, items, Vec::new()).unwrap();
    trainer.run(None).unwrap();
    let model = &trainer.model;
    let cfg = &model.config;
    let vocab = TaskVocabulary::new(cfg.task_dim, 1);
    let vmap = &corpus.features.visual["stim-000"];
    let z = LatentSequence {
        matrix: normal_matrix(&mut RngKey::new(4).rng(), cfg.max_len, cfg.model_dim),
        timestep: cfg.steps / 2,
    };
    let a = model.forward(&z, &model.joint_conditioning(vmap, &corpus.features.tasks[""]).unwrap()).unwrap();
    let b = model.forward(&z, &model.joint_conditioning(vmap, &vocab.feature("laptop")).unwrap()).unwrap();
    let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(diff > 0.0, "max |difference| {diff}");
}
