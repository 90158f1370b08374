//! Splittable seeds for reproducible noise.
//!
//! A [`RngKey`] is a pure function of the master seed and the path of labels
//! used to derive it, so any stream (per training step, per batch item, per
//! sampling chain) can be reconstructed without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngKey(u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey(splitmix64(seed))
    }

    /// Child key for a named purpose.
    pub fn fork(self, label: &str) -> Self {
        RngKey(splitmix64(self.0 ^ label_hash(label).rotate_left(17)))
    }

    /// Child key for an index (step, item, chain).
    pub fn at(self, index: u64) -> Self {
        RngKey(splitmix64(self.0.wrapping_add(splitmix64(index ^ 0xA076_1D64_78BD_642F))))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

/// `rows x cols` standard normal draws.
pub fn normal_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}
