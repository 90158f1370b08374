//! Histogram KL divergence between two score distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 32;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Equal-width bins over a shared range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        for &x in samples {
            counts[bin_of(x, lo, hi, bins)] += 1;
        }
        Self { lo, hi, counts }
    }

    /// Bin probabilities after adding `eps` to each and renormalizing.
    pub fn smoothed(&self, eps: f64) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        let raw: Vec<f64> = self.counts.iter().map(|&c| c as f64 / total as f64 + eps).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / z).collect()
    }
}

fn bin_of(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((x - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Smallest and largest value over both sample sets.
pub fn union_range(a: &[f64], b: &[f64]) -> (f64, f64) {
    a.iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// `KL(P_reference ‖ P_other)` in nats between shared-range histograms.
///
/// In the evaluation protocol `reference` is the human-vs-human distribution
/// and `other` the generated-vs-human one. A zero-width range puts all mass
/// in one bin and gives 0.
pub fn kl_divergence(reference: &[f64], other: &[f64], bins: usize, eps: f64) -> Result<f64> {
    if reference.is_empty() || other.is_empty() {
        return Err(Error::InsufficientScanpaths {
            needed: 1,
            got: 0,
        });
    }
    if bins < 2 || !(eps >= 0.0) {
        return Err(Error::Config(format!("KL needs at least 2 bins and eps >= 0 (got {bins}, {eps})")));
    }
    if reference.iter().chain(other).any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite metric sample".into()));
    }
    let (lo, hi) = union_range(reference, other);
    if hi <= lo {
        return Ok(0.0);
    }
    let p = Histogram::new(reference, lo, hi, bins).smoothed(eps);
    let q = Histogram::new(other, lo, hi, bins).smoothed(eps);
    Ok(p.iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0))
}
