//! Assessment machinery: point metrics, repeated-measures correlation,
//! change-group classification, bootstrap experiments and leave-one-subject-out
//! cross-validation.

mod changes;
mod harness;
mod metrics;

pub use changes::{classify_changes, ChangeAssignment, ChangeGroup, ChangeGroups};
pub use harness::{
    bootstrap, evaluate_forecasts, evaluate_split, loocv, origin_of, resample_subjects, split_by_origin, train_and_evaluate, BootstrapReport,
    BootstrapSummary, EvaluationConfig, EvaluationReport, HarnessConfig, LoocvFold, LoocvReport, NoProbe,
    NullReference, PredictionConfig, COPY_SEPARATOR, Probe, Replicate, SplitEvaluation, Summary,
};
pub use metrics::{
    endpoint_pairs, longitudinal_metrics, metrics, per_subject_mean_metrics, rmcorr, Aggregation, MetricSet, Variant,
    CORRELATION_UNDEFINED,
};
