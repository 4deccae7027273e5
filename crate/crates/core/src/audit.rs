//! Audit configuration and the end-to-end pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{
    apply_masking, derive_predictions, enumerate_subgroups, load_cohort, write_cohort_csv, AuditCohort, AxisIndex,
    ColumnSpec, GroupingAxis, InputFormat, MaskingPolicy, ThresholdRule,
};
use crate::counterfactual::{run_counterfactual, CounterfactualConfig};
use crate::error::{AuditError, Result};
use crate::learner::LearnerConfig;
use crate::observational::{fairness_panel, youden_thresholds, AxisSelection, PanelOptions};
use crate::report::{
    build_report, render_svg, write_csv_tables, write_json, AuditReport, AxisSummary, CohortSummary,
    CounterfactualSection, Stamped, SubgroupEntry, ThresholdMode, ThresholdSummary, YoudenSummary,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub path: PathBuf,
    /// Inferred from the file extension when absent.
    #[serde(default)]
    pub format: Option<InputFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    #[serde(default = "ThresholdConfig::default_tau")]
    pub tau: f64,
    /// Calibrate one Youden threshold per subgroup of this axis.
    #[serde(default)]
    pub youden_axis: Option<Vec<String>>,
    /// Re-threshold scores even where the input carries predictions.
    #[serde(default)]
    pub recompute: bool,
}

impl ThresholdConfig {
    fn default_tau() -> f64 {
        0.5
    }
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            tau: Self::default_tau(),
            youden_axis: None,
            recompute: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "OutputConfig::default_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub svg: bool,
}

impl OutputConfig {
    fn default_dir() -> PathBuf {
        PathBuf::from("audit_out")
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: Self::default_dir(),
            svg: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "AuditConfig::default_name")]
    pub name: String,
    pub input: InputConfig,
    pub columns: ColumnSpec,
    /// Attribute lists; defaults to each attribute alone plus the full
    /// intersection.
    #[serde(default)]
    pub axes: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub masking: MaskingPolicy,
    #[serde(default)]
    pub observational: PanelOptions,
    #[serde(default)]
    pub counterfactual: CounterfactualConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Worker threads; the machine's logical cores when absent.
    #[serde(default)]
    pub parallelism: Option<usize>,
}

impl AuditConfig {
    fn default_name() -> String {
        "cohort".into()
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| AuditError::config(e.to_string()))
    }

    /// A config with defaults for everything but the input and columns.
    pub fn new(input: impl Into<PathBuf>, columns: ColumnSpec) -> Self {
        AuditConfig {
            name: Self::default_name(),
            input: InputConfig {
                path: input.into(),
                format: None,
            },
            columns,
            axes: None,
            thresholds: ThresholdConfig::default(),
            masking: MaskingPolicy::default(),
            observational: PanelOptions::default(),
            counterfactual: CounterfactualConfig::default(),
            learner: LearnerConfig::default(),
            output: OutputConfig::default(),
            parallelism: None,
        }
    }

    fn check_attributes(&self, attrs: &[String], what: &str) -> Result<()> {
        if attrs.is_empty() {
            return Err(AuditError::config(format!("{what}: empty attribute list")));
        }
        for a in attrs {
            if !self.columns.attributes.contains(a) {
                return Err(AuditError::config(format!("{what}: `{a}` is not a declared attribute")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.columns.validate()?;
        self.counterfactual.validate()?;
        self.learner.validate()?;
        if !(self.thresholds.tau > 0.0 && self.thresholds.tau < 1.0) {
            return Err(AuditError::config("thresholds.tau must lie in (0, 1)"));
        }
        if self.masking.n_min < 1 {
            return Err(AuditError::config("masking.n_min must be ≥ 1"));
        }
        if self.parallelism == Some(0) {
            return Err(AuditError::config("parallelism must be ≥ 1"));
        }
        for attrs in self.axes.iter().flatten() {
            self.check_attributes(attrs, "axes")?;
        }
        if let Some(a) = &self.thresholds.youden_axis {
            self.check_attributes(a, "thresholds.youden_axis")?;
            if self.columns.y_score.is_none() {
                return Err(AuditError::config("Youden thresholds need a y_score column"));
            }
        }
        if let Some(a) = &self.counterfactual.axis {
            self.check_attributes(a, "counterfactual.axis")?;
        }
        Ok(())
    }

    /// The config with every default made explicit.
    pub fn resolved(&self) -> AuditConfig {
        let mut c = self.clone();
        let attrs = &self.columns.attributes;
        if c.axes.is_none() {
            let mut axes: Vec<Vec<String>> = attrs.iter().map(|a| vec![a.clone()]).collect();
            if attrs.len() > 1 {
                axes.push(attrs.clone());
            }
            c.axes = Some(axes);
        }
        if c.counterfactual.method.is_some() && c.counterfactual.axis.is_none() {
            c.counterfactual.axis = Some(attrs.clone());
        }
        if c.input.format.is_none() {
            c.input.format = Some(InputFormat::from_path(&c.input.path));
        }
        c
    }

    /// Resolved config as echoed in the report. Output location and thread
    /// count do not influence results and are left out.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self.resolved()).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
            obj.remove("parallelism");
        }
        v
    }
}

fn axes_of(config: &AuditConfig) -> Result<Vec<GroupingAxis>> {
    config
        .resolved()
        .axes
        .unwrap_or_default()
        .iter()
        .map(|attrs| GroupingAxis::from_attributes(attrs))
        .collect()
}

/// Run id: digest of the config echo and the canonical cohort contents.
pub fn run_id(echo: &serde_json::Value, cohort: &AuditCohort) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(echo.to_string().as_bytes());
    hasher.update(b"\n");
    let mut csv = Vec::new();
    write_cohort_csv(cohort, &mut csv)?;
    hasher.update(&csv);
    let digest = hasher.finalize();
    Ok(digest.iter().take(12).map(|b| format!("{b:02x}")).collect())
}

fn select(cohort: &AuditCohort, axis: &GroupingAxis, policy: &MaskingPolicy) -> Result<(AxisSelection, AxisSummary)> {
    let counts = enumerate_subgroups(cohort, axis)?;
    let masking = apply_masking(&counts, policy);
    let subgroups = counts
        .iter()
        .map(|(key, &n)| {
            let masked = masking.masked.contains(key);
            SubgroupEntry {
                key: key.clone(),
                label: key.label(),
                n: (!masked).then_some(n),
                masked,
            }
        })
        .collect();
    Ok((
        AxisSelection {
            axis: axis.clone(),
            masking,
        },
        AxisSummary {
            axis: axis.clone(),
            n_min: policy.n_min,
            subgroups,
        },
    ))
}

fn apply_thresholds(
    cohort: &AuditCohort,
    config: &AuditConfig,
    warnings: &mut Vec<String>,
) -> Result<(AuditCohort, ThresholdSummary)> {
    let t = &config.thresholds;
    match &t.youden_axis {
        None => {
            let cohort = derive_predictions(cohort, &ThresholdRule::Global(t.tau), t.recompute)?;
            let summary = ThresholdSummary {
                mode: ThresholdMode::Global,
                tau: t.tau,
                recomputed: t.recompute || config.columns.y_pred.is_none(),
                youden: None,
            };
            Ok((cohort, summary))
        }
        Some(attrs) => {
            if !cohort.has_scores() {
                return Err(AuditError::validation("Youden thresholds need a score on every record"));
            }
            let axis = GroupingAxis::from_attributes(attrs)?;
            let (selection, _) = select(cohort, &axis, &config.masking)?;
            let table = youden_thresholds(cohort, &axis, &selection.masking.qualifying)?;
            for (key, choice) in &table.groups {
                if choice.fallback {
                    warnings.push(format!("Youden threshold for `{key}` fell back to the global threshold"));
                }
            }
            let rule = ThresholdRule::PerGroup {
                axis: axis.clone(),
                thresholds: table.groups.iter().map(|(k, c)| (k.clone(), c.threshold)).collect(),
                fallback: table.global.threshold,
            };
            let cohort = derive_predictions(cohort, &rule, true)?;
            let summary = ThresholdSummary {
                mode: ThresholdMode::Youden,
                tau: t.tau,
                recomputed: true,
                youden: Some(YoudenSummary::new(&axis, &table)),
            };
            Ok((cohort, summary))
        }
    }
}

fn pipeline(cohort: &AuditCohort, config: &AuditConfig) -> Result<AuditReport> {
    let echo = config.echo();
    let id = run_id(&echo, cohort)?;
    let mut warnings = Vec::new();
    let (cohort, thresholds) = apply_thresholds(cohort, config, &mut warnings)?;

    let mut selections = Vec::new();
    let mut summaries = Vec::new();
    for axis in axes_of(config)? {
        let (sel, summary) = select(&cohort, &axis, &config.masking)?;
        if !sel.masking.masked.is_empty() {
            warnings.push(format!(
                "axis `{}`: {} subgroup(s) below n_min = {} masked",
                axis.name,
                sel.masking.masked.len(),
                config.masking.n_min
            ));
        }
        if sel.masking.qualifying.len() < 2 {
            warnings.push(format!("axis `{}`: fewer than two qualifying subgroups; gaps undefined", axis.name));
        }
        selections.push(sel);
        summaries.push(summary);
    }
    let panel = fairness_panel(&cohort, &selections, config.observational)?;
    for p in &panel.axes {
        for (name, gap) in [("DP", &p.gaps.dp_gap), ("EO-FPR", &p.gaps.eo_fpr_gap), ("EOD", &p.gaps.eod_gap)] {
            for key in &gap.excluded {
                warnings.push(format!("{name} gap on `{}`: `{key}` has an undefined rate", p.gaps.axis.name));
            }
        }
    }

    let counterfactual = match config.counterfactual.method {
        None => None,
        Some(_) => {
            let cf = &config.counterfactual;
            let attrs = cf.axis.clone().unwrap_or_else(|| config.columns.attributes.clone());
            let axis = GroupingAxis::from_attributes(&attrs)?;
            let (sel, _) = select(&cohort, &axis, &config.masking)?;
            let index = AxisIndex::build(&cohort, &axis, &sel.masking.qualifying)?;
            let result = run_counterfactual(&cohort, &index, cf, &config.learner)?;
            warnings.extend(result.warnings.iter().cloned());
            Some(Stamped::new(id.clone(), CounterfactualSection::new(&result, cf.ci_level)))
        }
    };

    let summary = CohortSummary {
        name: config.name.clone(),
        records: cohort.len(),
        positives: cohort.records().iter().filter(|r| r.y_true).count(),
        axes: summaries,
    };
    build_report(
        Stamped::new(id.clone(), echo),
        Stamped::new(id.clone(), summary),
        thresholds,
        Stamped::new(id, panel),
        counterfactual,
        warnings,
    )
}

fn with_pool<T: Send>(parallelism: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match parallelism {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| AuditError::config(format!("cannot start {n} worker threads: {e}")))?
            .install(f),
    }
}

/// Runs the audit on an already loaded cohort.
pub fn audit_cohort(cohort: &AuditCohort, config: &AuditConfig) -> Result<AuditReport> {
    config.validate()?;
    with_pool(config.parallelism, || pipeline(cohort, config))
}

/// Loads the configured input and runs the audit.
pub fn run_audit(config: &AuditConfig) -> Result<AuditReport> {
    config.validate()?;
    let cohort = load_cohort(&config.input.path, config.input.format, &config.columns)?;
    with_pool(config.parallelism, || pipeline(&cohort, config))
}

/// Files written by [`write_outputs`], plus warnings from figure rendering.
#[derive(Debug, Clone, Default)]
pub struct Emitted {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Writes `report.json`, the CSV tables under `tables/` and, if enabled,
/// the figures under `figures/`.
pub fn write_outputs(report: &AuditReport, output: &OutputConfig) -> Result<Emitted> {
    let dir: &Path = &output.dir;
    let json = dir.join("report.json");
    write_json(report, &json)?;
    let mut files = vec![json];
    files.extend(write_csv_tables(report, &dir.join("tables"))?);
    let mut warnings = Vec::new();
    if output.svg {
        let (svgs, w) = render_svg(report, &dir.join("figures"))?;
        files.extend(svgs);
        warnings = w;
    }
    Ok(Emitted { files, warnings })
}
