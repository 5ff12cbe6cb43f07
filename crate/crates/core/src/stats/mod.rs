//! Sparse-label segmentation metrics and paired significance testing.

pub mod hypothesis;
pub mod metrics;
pub mod table;

use thiserror::Error;

pub use hypothesis::{holm_bonferroni, wilcoxon_signed_rank, HolmOutcome, TestMethod, TestOutcome};
pub use metrics::{tpr_per_class, volume_weighted_average, ClassTpr, TprResult, VwaWeights};
pub use table::{
    significance_table, summary_table, ConfigResults, Mark, SignificanceTable, SubjectScores, SummaryTable,
};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("dimension mismatch: prediction {pred:?}, ground truth {gt:?}")]
    DimMismatch { pred: [usize; 3], gt: [usize; 3] },
    #[error("all weights are zero")]
    ZeroWeights,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("no nonzero pairs")]
    NoNonzeroPairs,
}
