//! Metrics, evaluation, report emission and the experiment runners.

pub mod metrics;
pub mod report;
pub mod runners;

pub use metrics::{accuracy, auroc, roc_curve, trapezoid_area, RocPoint};
pub use report::{emit_report, emit_report_bundle, parse_report_csv, MetricsReport, ReportFormat, ResultTable, SampleRecord, TableRow};
pub use runners::{
    ablation_config, baseline_vector, evaluate, report_from_scores, run_ablation, run_baselines, Scorer, TrainedScorer,
};
