//! Set-level scores: the diversity-aware sequence score and recall.

use super::sequence::{sequence_score, ClusterModel};
use crate::error::{Error, Result};
use crate::gaze::Scanpath;

/// Mean SS over all cross pairs.
pub fn cross_ss(a: &[Scanpath], b: &[Scanpath], clusters: &ClusterModel) -> Result<f64> {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += sequence_score(x, y, clusters, false)?;
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

/// Mean SS over unordered pairs of distinct members.
pub fn within_ss(set: &[Scanpath], clusters: &ClusterModel) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::InsufficientScanpaths { needed: 2, got: set.len() });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            sum += sequence_score(&set[i], &set[j], clusters, false)?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// `cross / (1 + |within_gen - within_hum|)`.
pub fn dss_from_parts(cross: f64, within_gen: f64, within_hum: f64) -> f64 {
    cross / (1.0 + (within_gen - within_hum).abs())
}

pub fn dss(gen: &[Scanpath], hum: &[Scanpath], clusters: &ClusterModel) -> Result<f64> {
    for set in [gen, hum] {
        if set.len() < 2 {
            return Err(Error::InsufficientScanpaths { needed: 2, got: set.len() });
        }
    }
    Ok(dss_from_parts(
        cross_ss(gen, hum, clusters)?,
        within_ss(gen, clusters)?,
        within_ss(hum, clusters)?,
    ))
}

/// Fraction of human scanpaths whose best SS against any generated one
/// exceeds `threshold`.
pub fn rss(gen: &[Scanpath], hum: &[Scanpath], clusters: &ClusterModel, threshold: f64) -> Result<f64> {
    for set in [gen, hum] {
        if set.is_empty() {
            return Err(Error::InsufficientScanpaths { needed: 1, got: 0 });
        }
    }
    let mut covered = 0usize;
    for h in hum {
        let mut best = 0.0f64;
        for g in gen {
            best = best.max(sequence_score(g, h, clusters, false)?);
        }
        if best > threshold {
            covered += 1;
        }
    }
    Ok(covered as f64 / hum.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::Fixation;

    fn grid() -> ClusterModel {
        let centers = (0..5).map(|i| (0.1 + 0.2 * i as f64, 0.5)).collect();
        ClusterModel { centers, bandwidth: 0.1 }
    }

    /// A scanpath spelling `symbols` over the centres of [`grid`].
    fn spell(symbols: &[usize]) -> Scanpath {
        Scanpath::new(
            symbols.iter().map(|&s| Fixation::new(0.1 + 0.2 * s as f64, 0.5, 0.2)).collect(),
            "s",
            "",
        )
    }

    #[test]
    fn formula() {
        assert!((dss_from_parts(0.5, 0.8, 0.6) - 0.5 / 1.2).abs() < 1e-15);
    }

    #[test]
    fn same_sets() {
        let c = grid();
        let h = vec![spell(&[0, 1, 2]), spell(&[2, 1, 0]), spell(&[0, 3, 4, 1])];
        let within = within_ss(&h, &c).unwrap();
        let cross = cross_ss(&h, &h, &c).unwrap();
        assert!((dss(&h, &h, &c).unwrap() - cross).abs() < 1e-15);
        assert!(within < 1.0);
        assert_eq!(rss(&h, &h, &c, 0.99).unwrap(), 1.0);
        assert!(matches!(dss(&h[..1], &h, &c), Err(Error::InsufficientScanpaths { .. })));
    }

    #[test]
    fn repeated_generation_is_penalized() {
        let c = grid();
        // Humans disagree with each other: within-set SS is 7/15.
        let h = vec![spell(&[0, 1, 2, 3, 4]), spell(&[0, 1, 4, 4, 4]), spell(&[3, 3, 2, 3, 4])];
        let within_h = within_ss(&h, &c).unwrap();
        assert!((within_h - 7.0 / 15.0).abs() < 1e-15);
        let g = vec![h[0].clone(); 4];
        assert_eq!(within_ss(&g, &c).unwrap(), 1.0);
        let cross = cross_ss(&g, &h, &c).unwrap();
        let d = dss(&g, &h, &c).unwrap();
        assert!((d - cross / (1.0 + (1.0 - within_h))).abs() < 1e-15);
        assert!(d < cross);
    }

    #[test]
    fn recall_counts_covered_humans() {
        let c = grid();
        let h = vec![spell(&[0, 1, 2, 3, 4]), spell(&[4, 4, 4, 4, 4]), spell(&[3, 3, 3, 3, 3])];
        // SS with h[0] is 4/5 = 0.8; with the others at most 1/5.
        let g = vec![spell(&[0, 1, 2, 3, 0])];
        assert!((rss(&g, &h, &c, 0.7).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(rss(&g, &h, &c, 0.85).unwrap(), 0.0);
        let none = vec![spell(&[1, 1, 1])];
        assert_eq!(rss(&none, &[spell(&[0, 0]), spell(&[4])], &c, 0.1).unwrap(), 0.0);
    }
}
