//! Sequence Score and its semantic variant: fixations become symbols
//! (nearest cluster centre, or segmentation label) and the symbol strings
//! are aligned with match 1, mismatch 0 and free gaps.

use serde::{Deserialize, Serialize};

use super::align::normalized_match_score;
use super::scanmatch::expand;
use crate::error::{Error, Result};
use crate::gaze::{Scanpath, SegmentationMap};

pub const DEFAULT_BANDWIDTH: f64 = 0.1;
/// Duration bin used by the duration-aware string variants, milliseconds.
pub const SEQUENCE_DURATION_BIN_MS: u32 = 50;
const SHIFT_TOL: f64 = 1e-4;
const MAX_ITERS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centers: Vec<(f64, f64)>,
    pub bandwidth: f64,
}

impl ClusterModel {
    pub fn nearest(&self, x: f64, y: f64) -> usize {
        let d2 = |c: &(f64, f64)| (c.0 - x).powi(2) + (c.1 - y).powi(2);
        let mut best = 0;
        for (i, c) in self.centers.iter().enumerate() {
            if d2(c) < d2(&self.centers[best]) {
                best = i;
            }
        }
        best
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Flat-kernel mean-shift.
///
/// Every point climbs to a mode by repeatedly moving to the mean of the
/// points within `bandwidth`. Modes are then ranked by how many points lie
/// within `bandwidth` of them (ties by first point index) and kept greedily
/// unless a kept mode is within `bandwidth / 2`.
pub fn meanshift_clusters(points: &[(f64, f64)], bandwidth: f64) -> Result<ClusterModel> {
    if points.is_empty() {
        return Err(Error::EmptyScanpath);
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!("bandwidth {bandwidth} must be positive")));
    }
    let modes: Vec<(f64, f64)> = points
        .iter()
        .map(|&start| {
            let mut m = start;
            for _ in 0..MAX_ITERS {
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
                for &p in points {
                    if dist(p, m) <= bandwidth {
                        sx += p.0;
                        sy += p.1;
                        n += 1;
                    }
                }
                if n == 0 {
                    break;
                }
                let next = (sx / n as f64, sy / n as f64);
                let shift = dist(next, m);
                m = next;
                if shift < SHIFT_TOL {
                    break;
                }
            }
            m
        })
        .collect();
    let support: Vec<usize> = modes
        .iter()
        .map(|&m| points.iter().filter(|&&p| dist(p, m) <= bandwidth).count())
        .collect();
    let mut order: Vec<usize> = (0..modes.len()).collect();
    order.sort_by(|&a, &b| support[b].cmp(&support[a]).then(a.cmp(&b)));
    let mut centers: Vec<(f64, f64)> = Vec::new();
    for i in order {
        if centers.iter().all(|&c| dist(c, modes[i]) > bandwidth / 2.0) {
            centers.push(modes[i]);
        }
    }
    Ok(ClusterModel { centers, bandwidth })
}

pub fn cluster_string(s: &Scanpath, clusters: &ClusterModel, with_duration: bool) -> Vec<usize> {
    expand(&s.fixations, |f| clusters.nearest(f.x, f.y), with_duration, SEQUENCE_DURATION_BIN_MS)
}

pub fn sequence_score(a: &Scanpath, b: &Scanpath, clusters: &ClusterModel, with_duration: bool) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyScanpath);
    }
    Ok(normalized_match_score(
        &cluster_string(a, clusters, with_duration),
        &cluster_string(b, clusters, with_duration),
    ))
}

pub fn label_string(s: &Scanpath, segmap: &SegmentationMap, with_duration: bool) -> Vec<u16> {
    expand(&s.fixations, |f| segmap.label_at(f.x, f.y), with_duration, SEQUENCE_DURATION_BIN_MS)
}

pub fn semantic_sequence_score(a: &Scanpath, b: &Scanpath, segmap: Option<&SegmentationMap>, with_duration: bool) -> Result<f64> {
    let segmap = segmap.ok_or_else(|| Error::MissingSegmentation(a.stimulus_id.clone()))?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyScanpath);
    }
    Ok(normalized_match_score(
        &label_string(a, segmap, with_duration),
        &label_string(b, segmap, with_duration),
    ))
}
