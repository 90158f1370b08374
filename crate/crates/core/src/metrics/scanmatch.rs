//! ScanMatch: alignment of spatially binned fixation strings.

use serde::{Deserialize, Serialize};

use super::align::needleman_wunsch;
use crate::error::{Error, Result};
use crate::gaze::{Fixation, Scanpath};

/// Most times one fixation's symbol is repeated in duration-aware strings.
pub const MAX_REPEATS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub grid_x: usize,
    pub grid_y: usize,
    /// Score of each gap position; not positive.
    pub gap_penalty: f64,
    pub substitution_scale: f64,
    pub duration_bin_ms: u32,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            grid_x: 12,
            grid_y: 8,
            gap_penalty: 0.0,
            substitution_scale: 1.0,
            duration_bin_ms: 50,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_x == 0 || self.grid_y == 0 || self.grid_x * self.grid_y > 26 * 26 {
            return Err(Error::Config(format!("grid {}x{} outside 1..=676 cells", self.grid_x, self.grid_y)));
        }
        if self.gap_penalty > 0.0 || !self.gap_penalty.is_finite() {
            return Err(Error::Config(format!("gap penalty {} must be <= 0", self.gap_penalty)));
        }
        if !(self.substitution_scale > 0.0) || self.duration_bin_ms == 0 {
            return Err(Error::Config("substitution scale and duration bin must be positive".into()));
        }
        Ok(())
    }
}

/// How many times a fixation's symbol appears in a duration-aware string.
pub fn duration_repeats(duration_s: f64, bin_ms: u32) -> usize {
    let bins = (duration_s * 1000.0 / f64::from(bin_ms)).ceil();
    (bins.max(1.0) as usize).min(MAX_REPEATS)
}

/// Expand per-fixation symbols, repeating by duration when asked.
pub fn expand<T: Clone>(fixations: &[Fixation], symbol: impl Fn(&Fixation) -> T, with_duration: bool, bin_ms: u32) -> Vec<T> {
    let mut out = Vec::with_capacity(fixations.len());
    for f in fixations {
        let s = symbol(f);
        let n = if with_duration { duration_repeats(f.duration, bin_ms) } else { 1 };
        out.extend(std::iter::repeat_n(s, n));
    }
    out
}

/// Grid cell `(column, row)` of a normalized position.
pub fn cell(cfg: &AlignmentConfig, x: f64, y: f64) -> (usize, usize) {
    let c = ((x * cfg.grid_x as f64).floor().max(0.0) as usize).min(cfg.grid_x - 1);
    let r = ((y * cfg.grid_y as f64).floor().max(0.0) as usize).min(cfg.grid_y - 1);
    (c, r)
}

/// `scale · (1 - d / d_max)` with `d` the distance between bin centres and
/// `d_max` the grid diagonal in bins.
pub fn substitution(cfg: &AlignmentConfig, a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    let dmax = (((cfg.grid_x - 1).pow(2) + (cfg.grid_y - 1).pow(2)) as f64).sqrt();
    if dmax == 0.0 {
        return cfg.substitution_scale;
    }
    cfg.substitution_scale * (1.0 - (dx * dx + dy * dy).sqrt() / dmax)
}

pub fn scanmatch(a: &Scanpath, b: &Scanpath, cfg: &AlignmentConfig, with_duration: bool) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyScanpath);
    }
    let sa = expand(&a.fixations, |f| cell(cfg, f.x, f.y), with_duration, cfg.duration_bin_ms);
    let sb = expand(&b.fixations, |f| cell(cfg, f.x, f.y), with_duration, cfg.duration_bin_ms);
    let score = needleman_wunsch(&sa, &sb, |x, y| substitution(cfg, *x, *y), cfg.gap_penalty);
    let norm = sa.len().max(sb.len()) as f64 * cfg.substitution_scale;
    Ok((score / norm).clamp(0.0, 1.0))
}
