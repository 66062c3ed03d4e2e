//! Metrics, the feature-reconstruction analysis and report files.

mod analysis;
mod metrics;
mod reports;

pub use analysis::{
    clean_copy, cosine_distance, feature_reconstruction_analysis, improvement_fractions, l2_distance, Evaluator,
    FeatureDistanceRecord,
};
pub use metrics::{auroc, compute_metrics, ClassificationMetrics};
pub use reports::{
    emit_reports, read_feature_distances, write_feature_distances, write_metrics, DISTANCES_FILE, METRICS_FILE,
};
