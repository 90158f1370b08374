//! Fixations, scanpaths and the JSON-lines corpus format.
//!
//! Coordinates are stored normalized to `[0, 1]` relative to the stimulus
//! frame; durations stay in seconds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default probability above which a token counts as a valid fixation.
pub const DEFAULT_VALIDITY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    /// Seconds.
    pub duration: f64,
}

impl Fixation {
    pub fn new(x: f64, y: f64, duration: f64) -> Self {
        Self { x, y, duration }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scanpath {
    pub fixations: Vec<Fixation>,
    pub stimulus_id: String,
    /// Empty for free viewing.
    pub task: String,
}

impl Scanpath {
    pub fn new(fixations: Vec<Fixation>, stimulus_id: impl Into<String>, task: impl Into<String>) -> Self {
        Self {
            fixations,
            stimulus_id: stimulus_id.into(),
            task: task.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    /// Positions only, in order.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.fixations.iter().map(|f| (f.x, f.y)).collect()
    }
}

/// A scanpath padded or truncated to a fixed number of rows.
///
/// `matrix` is row-major `max_len x 3` with columns `(x, y, duration)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedScanpath {
    pub matrix: Vec<f64>,
    pub validity: Vec<f64>,
    pub max_len: usize,
}

impl PaddedScanpath {
    pub fn valid_len(&self) -> usize {
        self.validity.iter().take_while(|&&u| u > 0.5).count()
    }

    pub fn row(&self, i: usize) -> Fixation {
        Fixation::new(self.matrix[3 * i], self.matrix[3 * i + 1], self.matrix[3 * i + 2])
    }

    /// Drop padded rows and rebuild a scanpath.
    pub fn to_scanpath(&self, stimulus_id: impl Into<String>, task: impl Into<String>) -> Scanpath {
        let fixations = (0..self.valid_len()).map(|i| self.row(i)).collect();
        Scanpath::new(fixations, stimulus_id, task)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    pub width: usize,
    pub height: usize,
    /// Row-major labels; 0 is background.
    pub labels: Vec<u16>,
}

impl SegmentationMap {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::InvalidStimulus(format!(
                "segmentation map {width}x{height} with {} labels",
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    /// Label under a normalized position.
    pub fn label_at(&self, x: f64, y: f64) -> u16 {
        let col = ((x * self.width as f64).floor().max(0.0) as usize).min(self.width - 1);
        let row = ((y * self.height as f64).floor().max(0.0) as usize).min(self.height - 1);
        self.labels[row * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StimulusRecord {
    pub stimulus_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub segmentation: Option<SegmentationMap>,
}

/// Scale pixel fixations into the unit square.
///
/// Off-frame coordinates are clamped to the border rather than rejected.
pub fn normalize(raw: &[(f64, f64, f64)], width_px: u32, height_px: u32) -> Result<Vec<Fixation>> {
    if width_px == 0 || height_px == 0 {
        return Err(Error::InvalidStimulus(format!("dimensions {width_px}x{height_px}")));
    }
    if raw.is_empty() {
        return Err(Error::EmptyScanpath);
    }
    let (w, h) = (f64::from(width_px), f64::from(height_px));
    raw.iter()
        .map(|&(x, y, dur)| {
            if !(dur > 0.0) || !x.is_finite() || !y.is_finite() {
                return Err(Error::InvalidStimulus(format!(
                    "fixation ({x}, {y}, {dur}) is not finite with positive duration"
                )));
            }
            Ok(Fixation::new((x / w).clamp(0.0, 1.0), (y / h).clamp(0.0, 1.0), dur))
        })
        .collect()
}

pub fn pad_truncate(s: &Scanpath, max_len: usize) -> PaddedScanpath {
    assert!(max_len >= 1, "max_len must be positive");
    let n = s.len().min(max_len);
    let mut matrix = vec![0.0; max_len * 3];
    let mut validity = vec![0.0; max_len];
    for (i, f) in s.fixations.iter().take(n).enumerate() {
        matrix[3 * i] = f.x;
        matrix[3 * i + 1] = f.y;
        matrix[3 * i + 2] = f.duration;
        validity[i] = 1.0;
    }
    PaddedScanpath { matrix, validity, max_len }
}

/// Length of the leading run of probabilities above `threshold`, floored at 1.
pub fn decode_length(valid_probs: &[f64], threshold: f64) -> usize {
    valid_probs.iter().take_while(|&&p| p > threshold).count().max(1)
}

/// One line of the corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub stimulus_id: String,
    pub task: String,
    pub subject_id: String,
    /// `[x_px, y_px, dur_s]` triples.
    pub fixations: Vec<[f64; 3]>,
    pub width_px: u32,
    pub height_px: u32,
}

impl CorpusRecord {
    pub fn scanpath(&self) -> Result<Scanpath> {
        let raw: Vec<_> = self.fixations.iter().map(|f| (f[0], f[1], f[2])).collect();
        let fixations = normalize(&raw, self.width_px, self.height_px)?;
        Ok(Scanpath::new(fixations, self.stimulus_id.clone(), self.task.clone()))
    }

    /// Build a record from a normalized scanpath, converting back to pixels.
    pub fn from_scanpath(s: &Scanpath, subject_id: impl Into<String>, width_px: u32, height_px: u32) -> Self {
        let (w, h) = (f64::from(width_px), f64::from(height_px));
        Self {
            stimulus_id: s.stimulus_id.clone(),
            task: s.task.clone(),
            subject_id: subject_id.into(),
            fixations: s.fixations.iter().map(|f| [f.x * w, f.y * h, f.duration]).collect(),
            width_px,
            height_px,
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        if rec.fixations.is_empty() {
            return Err(Error::format(path, format!("line {}: empty scanpath", lineno + 1)));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("corpus records always serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
