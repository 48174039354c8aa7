//! Protocol splitters, confusion matrices, recall/F1 metrics and reports.

mod folds;
mod metrics;
mod report;

pub use folds::{folds_hde, folds_loso, Fold, Folds};
pub use metrics::{confusion, macro_f1, uar, war, ClassMetrics, ConfusionMatrix};
pub use report::{aggregate, percentage_table, FoldPredictions, FoldReport, Metrics, Report};
