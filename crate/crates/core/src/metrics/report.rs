//! Corpus-level evaluation: pairwise metric distributions for generated vs
//! human and human vs human pairs, their KL divergence, set-level DSS and
//! RSS, and a summary table.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diversity::{dss, rss};
use super::kl::{kl_divergence, union_range, Histogram, DEFAULT_BINS, DEFAULT_EPS};
use super::multimatch::multimatch;
use super::scanmatch::{scanmatch, AlignmentConfig};
use super::sequence::{meanshift_clusters, semantic_sequence_score, sequence_score, ClusterModel, DEFAULT_BANDWIDTH};
use crate::error::{Error, Result};
use crate::gaze::{CorpusRecord, Fixation, Scanpath, SegmentationMap};

pub const DEFAULT_RSS_THRESHOLD: f64 = 0.7;
pub const GEN_VS_HUMAN: &str = "gen-vs-human";
pub const HUMAN_VS_HUMAN: &str = "human-vs-human";
pub const KL_DIRECTION: &str = "KL(human-vs-human || gen-vs-human)";

/// Metric names in report order.
pub const METRICS: [&str; 10] = [
    "MM_Sh", "MM_Len", "MM_Dir", "MM_Pos", "MM_Dur", "SM_w_Dur", "SM_wo_Dur", "SS_w_Dur", "SS_wo_Dur", "SemSS",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub scanmatch: AlignmentConfig,
    pub bandwidth: f64,
    pub rss_threshold: f64,
    pub bins: usize,
    pub eps: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scanmatch: AlignmentConfig::default(),
            bandwidth: DEFAULT_BANDWIDTH,
            rss_threshold: DEFAULT_RSS_THRESHOLD,
            bins: DEFAULT_BINS,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDistribution {
    pub label: String,
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub gen_vs_human: MetricDistribution,
    pub human_vs_human: MetricDistribution,
    /// Histograms over the shared range; absent when either side is empty.
    pub gen_histogram: Option<Histogram>,
    pub human_histogram: Option<Histogram>,
    pub kl: Option<f64>,
}

/// Means of the generated-vs-human distributions, plus DSS and RSS
/// averaged over (stimulus, task) groups.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    #[serde(rename = "Sh")]
    pub shape: Option<f64>,
    #[serde(rename = "Len")]
    pub length: Option<f64>,
    #[serde(rename = "Dir")]
    pub direction: Option<f64>,
    #[serde(rename = "Pos")]
    pub position: Option<f64>,
    #[serde(rename = "Dur")]
    pub duration: Option<f64>,
    #[serde(rename = "Avg")]
    pub mm_average: Option<f64>,
    #[serde(rename = "SM_w_Dur")]
    pub sm_with_duration: Option<f64>,
    #[serde(rename = "SM_wo_Dur")]
    pub sm_without_duration: Option<f64>,
    #[serde(rename = "SS_w_Dur")]
    pub ss_with_duration: Option<f64>,
    #[serde(rename = "SS_wo_Dur")]
    pub ss_without_duration: Option<f64>,
    #[serde(rename = "SemSS")]
    pub semss: Option<f64>,
    #[serde(rename = "DSS")]
    pub dss: Option<f64>,
    #[serde(rename = "RSS")]
    pub rss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: EvalConfig,
    pub kl_direction: String,
    pub groups: usize,
    pub metrics: Vec<MetricEntry>,
    pub summary: SummaryTable,
}

impl MetricReport {
    pub fn metric(&self, name: &str) -> Option<&MetricEntry> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// Scores of one ordered pair; `None` where a metric does not apply.
#[derive(Clone, Copy, Debug, Default)]
struct PairScores {
    values: [Option<f64>; 10],
}

struct Group<'a> {
    gen: Vec<(&'a str, Scanpath)>,
    human: Vec<(&'a str, Scanpath)>,
    width: f64,
    height: f64,
    clusters: &'a ClusterModel,
    segmap: Option<&'a SegmentationMap>,
}

fn to_pixels(s: &Scanpath, w: f64, h: f64) -> Scanpath {
    let f = s.fixations.iter().map(|f| Fixation::new(f.x * w, f.y * h, f.duration)).collect();
    Scanpath::new(f, s.stimulus_id.clone(), s.task.clone())
}

fn pair_scores(a: &Scanpath, b: &Scanpath, g: &Group, cfg: &EvalConfig) -> Result<PairScores> {
    let mut v = [None; 10];
    let mm = multimatch(&to_pixels(a, g.width, g.height), &to_pixels(b, g.width, g.height), g.width.hypot(g.height));
    if let Some(mm) = mm {
        v[0] = mm.shape;
        v[1] = mm.length;
        v[2] = mm.direction;
        v[3] = Some(mm.position);
        v[4] = Some(mm.duration);
    }
    v[5] = Some(scanmatch(a, b, &cfg.scanmatch, true)?);
    v[6] = Some(scanmatch(a, b, &cfg.scanmatch, false)?);
    v[7] = Some(sequence_score(a, b, g.clusters, true)?);
    v[8] = Some(sequence_score(a, b, g.clusters, false)?);
    if g.segmap.is_some() {
        v[9] = Some(semantic_sequence_score(a, b, g.segmap, false)?);
    }
    Ok(PairScores { values: v })
}

struct GroupResult {
    gen_vs_human: Vec<PairScores>,
    human_vs_human: Vec<PairScores>,
    dss: Option<f64>,
    rss: Option<f64>,
}

fn eval_group(g: &Group, cfg: &EvalConfig) -> Result<GroupResult> {
    // Pairs sharing a subject are skipped on both sides, so evaluating a
    // corpus against itself reproduces the human consistency distribution.
    let mut gen_vs_human = Vec::new();
    for (gs, a) in &g.gen {
        for (hs, b) in &g.human {
            if gs != hs {
                gen_vs_human.push(pair_scores(a, b, g, cfg)?);
            }
        }
    }
    let mut human_vs_human = Vec::new();
    for (i, (s1, a)) in g.human.iter().enumerate() {
        for (j, (s2, b)) in g.human.iter().enumerate() {
            if i != j && s1 != s2 {
                human_vs_human.push(pair_scores(a, b, g, cfg)?);
            }
        }
    }
    let gen: Vec<Scanpath> = g.gen.iter().map(|(_, s)| s.clone()).collect();
    let hum: Vec<Scanpath> = g.human.iter().map(|(_, s)| s.clone()).collect();
    let dss = if gen.len() >= 2 && hum.len() >= 2 {
        Some(dss(&gen, &hum, g.clusters)?)
    } else {
        None
    };
    let rss = if !gen.is_empty() && !hum.is_empty() {
        Some(rss(&gen, &hum, g.clusters, cfg.rss_threshold)?)
    } else {
        None
    };
    Ok(GroupResult {
        gen_vs_human,
        human_vs_human,
        dss,
        rss,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluate generated records against human records.
///
/// Scanpaths are grouped by (stimulus, task). Sequence-score clusters come
/// from all human fixations on a stimulus; MultiMatch runs in the human
/// records' pixel frame.
pub fn evaluate(
    generated: &[CorpusRecord],
    human: &[CorpusRecord],
    segmaps: &BTreeMap<String, SegmentationMap>,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    cfg.scanmatch.validate()?;
    let mut frames: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    let mut points: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    let mut groups: BTreeMap<(&str, &str), (Vec<(&str, Scanpath)>, Vec<(&str, Scanpath)>)> = BTreeMap::new();
    for r in human {
        let s = r.scanpath()?;
        frames.entry(&r.stimulus_id).or_insert((r.width_px, r.height_px));
        points.entry(&r.stimulus_id).or_default().extend(s.points());
        groups.entry((&r.stimulus_id, &r.task)).or_default().1.push((&r.subject_id, s));
    }
    for r in generated {
        if !frames.contains_key(r.stimulus_id.as_str()) {
            return Err(Error::InvalidStimulus(format!(
                "generated scanpath for stimulus {:?} has no human reference",
                r.stimulus_id
            )));
        }
        let s = r.scanpath()?;
        groups.entry((&r.stimulus_id, &r.task)).or_default().0.push((&r.subject_id, s));
    }
    let clusters: BTreeMap<&str, ClusterModel> = points
        .into_iter()
        .map(|(k, p)| Ok((k, meanshift_clusters(&p, cfg.bandwidth)?)))
        .collect::<Result<_>>()?;

    let work: Vec<Group> = groups
        .into_iter()
        .filter(|(_, (_, hum))| !hum.is_empty())
        .map(|((stim, _), (gen, human))| {
            let (w, h) = frames[stim];
            Group {
                gen,
                human,
                width: f64::from(w),
                height: f64::from(h),
                clusters: &clusters[stim],
                segmap: segmaps.get(stim),
            }
        })
        .collect();
    let results: Vec<GroupResult> = work.par_iter().map(|g| eval_group(g, cfg)).collect::<Result<_>>()?;

    let mut metrics = Vec::with_capacity(METRICS.len());
    for (k, name) in METRICS.iter().enumerate() {
        let collect = |f: fn(&GroupResult) -> &Vec<PairScores>| -> Vec<f64> {
            results.iter().flat_map(|r| f(r).iter().filter_map(|p| p.values[k])).collect()
        };
        let gvh = collect(|r| &r.gen_vs_human);
        let hvh = collect(|r| &r.human_vs_human);
        let (kl, gh, hh) = if gvh.is_empty() || hvh.is_empty() {
            (None, None, None)
        } else {
            let (lo, hi) = union_range(&hvh, &gvh);
            (
                Some(kl_divergence(&hvh, &gvh, cfg.bins, cfg.eps)?),
                Some(Histogram::new(&gvh, lo, hi, cfg.bins)),
                Some(Histogram::new(&hvh, lo, hi, cfg.bins)),
            )
        };
        metrics.push(MetricEntry {
            name: name.to_string(),
            gen_vs_human: MetricDistribution {
                label: GEN_VS_HUMAN.into(),
                samples: gvh,
            },
            human_vs_human: MetricDistribution {
                label: HUMAN_VS_HUMAN.into(),
                samples: hvh,
            },
            gen_histogram: gh,
            human_histogram: hh,
            kl,
        });
    }

    let m = |i: usize| mean(&metrics[i].gen_vs_human.samples);
    let mm: Vec<Option<f64>> = (0..5).map(m).collect();
    let dss_values: Vec<f64> = results.iter().filter_map(|r| r.dss).collect();
    let rss_values: Vec<f64> = results.iter().filter_map(|r| r.rss).collect();
    let summary = SummaryTable {
        shape: mm[0],
        length: mm[1],
        direction: mm[2],
        position: mm[3],
        duration: mm[4],
        mm_average: mm.iter().copied().collect::<Option<Vec<f64>>>().and_then(|v| mean(&v)),
        sm_with_duration: m(5),
        sm_without_duration: m(6),
        ss_with_duration: m(7),
        ss_without_duration: m(8),
        semss: m(9),
        dss: mean(&dss_values),
        rss: mean(&rss_values),
    };
    Ok(MetricReport {
        config: cfg.clone(),
        kl_direction: KL_DIRECTION.into(),
        groups: results.len(),
        metrics,
        summary,
    })
}
