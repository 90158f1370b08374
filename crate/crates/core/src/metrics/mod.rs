//! Scanpath similarity, diversity and distribution-comparison metrics.

pub mod align;
pub mod diversity;
pub mod kl;
pub mod multimatch;
pub mod report;
pub mod scanmatch;
pub mod segmap;
pub mod sequence;

pub use align::{needleman_wunsch, normalized_match_score};
pub use diversity::{dss, rss};
pub use kl::kl_divergence;
pub use multimatch::{multimatch, MultiMatch};
pub use report::{evaluate, EvalConfig, MetricReport};
pub use scanmatch::{scanmatch, AlignmentConfig};
pub use sequence::{meanshift_clusters, semantic_sequence_score, sequence_score, ClusterModel};
