use std::sync::Arc;

use gazediff::conditioning::{TaskFeature, VisualFeatureMap};
use gazediff::denoiser::{Denoiser, DenoiserConfig};
use gazediff::diffusion::{batch_losses, sqrt_schedule, TimestepSampler, TrainingItem, SCHEDULE_OFFSET};
use gazediff::gaze::{pad_truncate, Fixation, Scanpath};
use gazediff::numerics::nn::attention_weights;
use gazediff::numerics::rng::normal_matrix;
use gazediff::numerics::{AdamW, RngKey};
use proptest::prelude::*;
use rand::Rng;

fn item(cfg: &DenoiserConfig, seed: u64) -> TrainingItem {
    let mut rng = RngKey::new(seed).fork("item").rng();
    let n = rng.random_range(1..=cfg.max_len);
    let fixations = (0..n).map(|_| Fixation::new(rng.random(), rng.random(), rng.random_range(0.1..0.5))).collect();
    TrainingItem {
        scanpath: pad_truncate(&Scanpath::new(fixations, "s", ""), cfg.max_len),
        visual: Arc::new(VisualFeatureMap::new(2, 2, cfg.visual_dim, normal_matrix(&mut rng, 4, cfg.visual_dim).into_data()).unwrap()),
        task: Arc::new(TaskFeature {
            vector: normal_matrix(&mut rng, 1, cfg.task_dim).into_data(),
        }),
    }
}

/// Parameter bits after `k` AdamW steps on two items.
fn trained_bits(seed: u64, k: u64) -> Vec<u64> {
    let cfg = DenoiserConfig::micro();
    let mut model = Denoiser::new(cfg.clone(), seed).unwrap();
    let schedule = sqrt_schedule(cfg.steps, SCHEDULE_OFFSET).unwrap();
    let sampler = TimestepSampler::new(cfg.steps);
    let batch = [item(&cfg, seed), item(&cfg, seed + 1)];
    let opt = AdamW::default();
    for step in 1..=k {
        let results = batch_losses(&model, &schedule, &sampler, &batch, RngKey::new(seed).at(step), true, true).unwrap();
        model.store.zero_grad();
        for r in &results {
            model.store.accumulate(r.grads.as_ref().unwrap(), 0.5);
        }
        opt.step(&mut model.store, step);
    }
    model.store.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn identical_seeds_give_identical_parameters(seed in 0u64..1_000_000, k in 1u64..5) {
        let a = trained_bits(seed, k);
        prop_assert_eq!(&a, &trained_bits(seed, k));
        prop_assert_ne!(a, trained_bits(seed + 7, k));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn attention_rows_are_probability_vectors(
        seed in any::<u64>(),
        nq in 1usize..7,
        nk in 1usize..9,
        heads in 1usize..4,
        head_dim in 1usize..5,
        scale in 0.01f64..40.0,
    ) {
        let mut rng = RngKey::new(seed).rng();
        let d = heads * head_dim;
        let q = normal_matrix(&mut rng, nq, d).map(|x| x * scale);
        let k = normal_matrix(&mut rng, nk, d).map(|x| x * scale);
        let weights = attention_weights(&q, &k, heads).unwrap();
        prop_assert_eq!(weights.len(), heads);
        for w in &weights {
            prop_assert_eq!(w.shape(), &[nq, nk][..]);
            for i in 0..nq {
                prop_assert!(w.row(i).iter().all(|&p| p >= 0.0));
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
