//! Retrieval and classification metrics, ranked-run files, and reports.

mod metrics;
mod report;
mod run;

pub use metrics::{
    classification_metrics, entail_at_k, f_beta, fleiss_kappa, mean, pairwise_sum, recall_at_k, std_dev,
    ClassificationMetrics,
};
pub use report::{bar_chart_svg, hash_file, line_chart_svg, sha256_hex, MetricsReport, Provenance, Table, REPORT_SCHEMA};
pub use run::{Direction, EdgeSet, GoldRelation, RankedRun, Relation};
