//! Measurement of concept reliance and group robustness.
//!
//! Sensitivities are directional derivatives of a logit along a concept vector at a hidden
//! layer; the TCAV score is the fraction of them that is strictly positive. Concept-probe
//! accuracy refits a linear concept classifier on held-out activations. Worst-group
//! accuracy, demographic parity and equalized odds score predictions against labels and
//! a binary attribute, and the removal diagnostic compares striped-train with clean-test
//! accuracy at the last epoch.

pub mod error;
pub mod fairness;
pub mod groups;
pub mod probe;
pub mod removal;
pub mod report;
pub mod sensitivity;

pub use error::{EvalError, Result};
pub use fairness::{fairness_metrics, FairnessMetrics};
pub use groups::{group_accuracy, worst_group_accuracy, GroupMetrics, GroupRow};
pub use probe::{
    balanced_accuracy, balanced_subsample, concept_probe_accuracy, fit_concept_vector, linear_probe_accuracy,
    probe_activations, stratified_split, ProbeAccuracy,
};
pub use removal::{classify_gap, removal_diagnostic, RemovalReport, DEFAULT_GAP_THRESHOLD};
pub use report::{EvalReport, MetricRow};
pub use sensitivity::{
    probe_sensitivity, sensitivity, sensitivity_report, tcav_bootstrap, tcav_score, SensitivityReport, TcavScore,
    BOOTSTRAP_RESAMPLES,
};
