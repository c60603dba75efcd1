//! Overlap metrics, cross-validation folds, paired statistics and the
//! configuration comparison report.

mod boxplot;
mod folds;
mod metrics;
mod report;
mod wilcoxon;

pub use boxplot::{box_stats, quantile, BoxStats};
pub use folds::{make_folds, train_val_split, FoldMode, FoldSplit};
pub use metrics::{dice, jaccard};
pub use report::{
    compare_report, parse_metrics_csv, stars, write_metrics_csv, CompareReport, ConfigSummary, MetricRecord,
    PairwiseTest, SequenceConfig,
};
pub use wilcoxon::{exact_lower_tail, wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("need at least {needed} cases, got {got}")]
    TooFewCases { needed: usize, got: usize },
    #[error("samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("every paired difference is zero")]
    AllZeroDifferences,
    #[error("empty input")]
    EmptyInput,
    #[error("unpaired records: {0}")]
    UnpairedRecords(String),
    #[error("malformed metrics: {0}")]
    Parse(String),
}
