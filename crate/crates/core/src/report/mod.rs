//! Versioned audit report and its emitted artifacts.
//!
//! Serialization is canonical: struct fields have a fixed order, subgroups
//! appear in key order and the config echo is a sorted JSON object, so equal
//! reports produce equal bytes. Masked subgroups are listed by key only.

mod svg;
mod tables;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use svg::render_svg;
pub use tables::{heatmap_grid, panel_markdown, write_csv_tables, HeatmapGrid, HEATMAP_METRICS};

use crate::cohort::{GroupingAxis, SubgroupKey};
use crate::counterfactual::{
    CounterfactualResult, EcdfSeries, Method, NullMetric, SideRates, UValueSet,
};
use crate::error::{AuditError, Result};
use crate::observational::{AxisPanel, FairnessPanel, PerformanceSummary, ThresholdChoice, YoudenTable};

pub const SCHEMA_VERSION: &str = "1.0.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupEntry {
    pub key: SubgroupKey,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub axis: GroupingAxis,
    pub n_min: usize,
    pub subgroups: Vec<SubgroupEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub name: String,
    pub records: usize,
    pub positives: usize,
    pub axes: Vec<AxisSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Predictions taken from the input or from `score ≥ tau`.
    Global,
    /// Per-group Youden thresholds on one axis.
    Youden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupThreshold {
    pub key: SubgroupKey,
    #[serde(flatten)]
    pub choice: ThresholdChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoudenSummary {
    pub axis: String,
    pub global: ThresholdChoice,
    pub groups: Vec<GroupThreshold>,
}

impl YoudenSummary {
    pub fn new(axis: &GroupingAxis, table: &YoudenTable) -> Self {
        YoudenSummary {
            axis: axis.name.clone(),
            global: table.global.clone(),
            groups: table
                .groups
                .iter()
                .map(|(key, choice)| GroupThreshold {
                    key: key.clone(),
                    choice: choice.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub mode: ThresholdMode,
    pub tau: f64,
    pub recomputed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub youden: Option<YoudenSummary>,
}

/// A null distribution reduced to the values the report keeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub metric: NullMetric,
    pub observed: Option<f64>,
    pub replicates: usize,
    pub defined: usize,
    pub mean: Option<f64>,
    pub central_lo: Option<f64>,
    pub central_hi: Option<f64>,
    pub quantile: Option<f64>,
    pub p_two_sided: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSection {
    pub axis: String,
    pub method: Method,
    pub epsilon: f64,
    pub ci_level: f64,
    pub observed: SideRates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<SideRates>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardized: Option<SideRates>,
    pub u_values: UValueSet,
    pub nulls: Vec<NullSummary>,
    pub ecdf: Vec<EcdfSeries>,
}

impl CounterfactualSection {
    pub fn new(result: &CounterfactualResult, ci_level: f64) -> Self {
        let nulls = result
            .nulls
            .iter()
            .map(|n| {
                let defined = n.defined();
                let (central_lo, central_hi) = n.central_interval(ci_level).unzip();
                NullSummary {
                    metric: n.metric,
                    observed: n.observed,
                    replicates: n.values.len(),
                    defined: defined.len(),
                    mean: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                    central_lo,
                    central_hi,
                    quantile: n.quantile,
                    p_two_sided: n.p_two_sided,
                }
            })
            .collect();
        CounterfactualSection {
            axis: result.axis.clone(),
            method: result.method,
            epsilon: result.u_values.epsilon,
            ci_level,
            observed: result.observed.clone(),
            permutation: result.permutation.clone(),
            standardized: result.standardized.clone(),
            u_values: result.u_values.clone(),
            nulls,
            ecdf: result.ecdf.clone(),
        }
    }

    /// Rates shown in the CI plots: the u-value source.
    pub fn primary_rates(&self) -> &SideRates {
        self.standardized
            .as_ref()
            .or(self.permutation.as_ref())
            .unwrap_or(&self.observed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: String,
    pub run_id: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub cohort: CohortSummary,
    pub thresholds: ThresholdSummary,
    pub performance: PerformanceSummary,
    pub observational: Vec<AxisPanel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual: Option<CounterfactualSection>,
    pub warnings: Vec<String>,
}

/// A report input tagged with the run that produced it.
#[derive(Debug, Clone)]
pub struct Stamped<T> {
    pub run_id: String,
    pub value: T,
}

impl<T> Stamped<T> {
    pub fn new(run_id: impl Into<String>, value: T) -> Self {
        Stamped {
            run_id: run_id.into(),
            value,
        }
    }
}

/// Assembles a report; every part must carry the run id of the config.
pub fn build_report(
    config: Stamped<serde_json::Value>,
    cohort: Stamped<CohortSummary>,
    thresholds: ThresholdSummary,
    panel: Stamped<FairnessPanel>,
    counterfactual: Option<Stamped<CounterfactualSection>>,
    warnings: Vec<String>,
) -> Result<AuditReport> {
    let run_id = config.run_id;
    let parts = [
        ("cohort summary", &cohort.run_id),
        ("fairness panel", &panel.run_id),
    ];
    let cf_id = counterfactual.as_ref().map(|c| ("counterfactual results", &c.run_id));
    for (what, id) in parts.into_iter().chain(cf_id) {
        if *id != run_id {
            return Err(AuditError::validation(format!(
                "{what} belong to run {id}, expected {run_id}"
            )));
        }
    }
    let panel = panel.value;
    let summary = cohort.value;
    for axis in &panel.axes {
        if !summary.axes.iter().any(|a| a.axis == axis.gaps.axis) {
            return Err(AuditError::validation(format!(
                "panel axis `{}` missing from the cohort summary",
                axis.gaps.axis.name
            )));
        }
    }
    Ok(AuditReport {
        schema_version: SCHEMA_VERSION.into(),
        run_id,
        config: config.value,
        cohort: summary,
        thresholds,
        performance: panel.performance,
        observational: panel.axes,
        counterfactual: counterfactual.map(|c| c.value),
        warnings,
    })
}

pub fn to_json(report: &AuditReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)
        .map_err(|e| AuditError::validation(format!("report serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json(report: &AuditReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| AuditError::io(parent, e))?;
    }
    fs::write(path, to_json(report)?).map_err(|e| AuditError::io(path, e))
}

pub fn read_json(path: &Path) -> Result<AuditReport> {
    let text = fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
    let report: AuditReport = serde_json::from_str(&text).map_err(|source| AuditError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(AuditError::validation(format!(
            "unsupported report schema version {}",
            report.schema_version
        )));
    }
    Ok(report)
}
