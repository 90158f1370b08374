use gazediff::conditioning::{joint_embed, Affine, TaskVocabulary, VisualFeatureMap};
use gazediff::numerics::rng::normal_matrix;
use gazediff::numerics::RngKey;
use proptest::prelude::*;
use rand::seq::SliceRandom;

struct Setup {
    vmap: VisualFeatureMap,
    proj: [Affine; 3],
    vocab: TaskVocabulary,
}

fn setup(seed: u64, h: usize, w: usize, vd: usize, td: usize, d: usize) -> Setup {
    let mut rng = RngKey::new(seed).rng();
    let mut affine = |i: usize, o: usize| Affine {
        weight: normal_matrix(&mut rng, i, o),
        bias: normal_matrix(&mut rng, 1, o),
    };
    let proj = [affine(vd, d), affine(td, d), affine(2 * d, d)];
    let vmap = VisualFeatureMap::new(h, w, vd, normal_matrix(&mut rng, h * w, vd).into_data()).unwrap();
    Setup {
        vmap,
        proj,
        vocab: TaskVocabulary::new(td, seed),
    }
}

fn dims() -> impl Strategy<Value = (u64, usize, usize, usize, usize, usize)> {
    (any::<u64>(), 1usize..5, 1usize..5, 1usize..7, 1usize..6, 1usize..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn output_has_one_row_per_patch((seed, h, w, vd, td, d) in dims(), task in ".{0,12}") {
        let s = setup(seed, h, w, vd, td, d);
        let out = joint_embed(&s.vmap, &s.vocab.feature(&task), &s.proj[0], &s.proj[1], &s.proj[2]).unwrap();
        prop_assert_eq!(out.matrix.shape(), &[h * w, d][..]);
    }

    #[test]
    fn permuting_patches_permutes_rows((seed, h, w, vd, td, d) in dims(), task in "[a-z ]{0,8}") {
        let s = setup(seed, h, w, vd, td, d);
        let t = s.vocab.feature(&task);
        let base = joint_embed(&s.vmap, &t, &s.proj[0], &s.proj[1], &s.proj[2]).unwrap();
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut RngKey::new(seed).fork("perm").rng());
        let data: Vec<f64> = perm.iter().flat_map(|&i| s.vmap.features.row(i).to_vec()).collect();
        let shuffled = VisualFeatureMap::new(h, w, vd, data).unwrap();
        let out = joint_embed(&shuffled, &t, &s.proj[0], &s.proj[1], &s.proj[2]).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in out.matrix.row(r).iter().zip(base.matrix.row(i)) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn frozen_projections_are_deterministic((seed, h, w, vd, td, d) in dims(), task in ".{0,12}") {
        let s = setup(seed, h, w, vd, td, d);
        let t = s.vocab.feature(&task);
        let a = joint_embed(&s.vmap, &t, &s.proj[0], &s.proj[1], &s.proj[2]).unwrap();
        let b = joint_embed(&s.vmap, &t, &s.proj[0], &s.proj[1], &s.proj[2]).unwrap();
        prop_assert_eq!(a.matrix.data(), b.matrix.data());
    }
}
