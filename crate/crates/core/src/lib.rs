//! Intersectional fairness auditing for binary predictions.
//!
//! The pipeline loads a cohort ([`cohort`]), masks small subgroups, computes
//! single-axis and intersectional gap metrics ([`observational`]), and
//! optionally asks how much of the disparity is attributable to group
//! membership ([`counterfactual`]). [`report`] serializes the result;
//! [`synth`] produces cohorts with known expected metrics.

pub mod audit;
pub mod cohort;
pub mod counterfactual;
pub mod error;
pub mod learner;
pub mod observational;
pub mod report;
mod stats;
pub mod synth;

pub use audit::{audit_cohort, run_audit, write_outputs, AuditConfig};
pub use cohort::{
    apply_masking, enumerate_subgroups, load_cohort, AuditCohort, AxisIndex, ColumnSpec, GroupingAxis, MaskingPolicy,
    PredictionRecord, SubgroupKey,
};
pub use counterfactual::{run_counterfactual, CounterfactualConfig, CounterfactualResult, Method, Side};
pub use error::{AuditError, Result};
pub use learner::{fit_logistic, LearnerConfig};
pub use observational::{fairness_panel, FairnessGapSet, FairnessPanel};
pub use report::AuditReport;
pub use synth::{generate_cohort, oracle_metrics, SynthOracle, SynthSpec};
