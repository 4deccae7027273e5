//! Prediction records, cohort loading, subgroup enumeration and small-cell
//! masking.
//!
//! A cohort is loaded once from CSV or JSON lines and is immutable
//! afterwards. Column roles are declared up front in a [`ColumnSpec`]; no
//! role is ever inferred from the header.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AuditError, Result};

/// Label that joins the categories of an intersectional subgroup.
pub const INTERSECTION_SEPARATOR: &str = " x ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateValue {
    Numeric(f64),
    Category(String),
}

/// One audited individual.
///
/// `attributes` and `covariates` are positional: they line up with the
/// attribute and covariate declarations of the owning cohort's schema.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub y_true: bool,
    pub y_score: Option<f64>,
    pub y_pred: Option<bool>,
    pub attributes: Vec<String>,
    pub covariates: Vec<CovariateValue>,
}

impl PredictionRecord {
    /// The hard prediction; panics if predictions were never materialized.
    pub fn prediction(&self) -> bool {
        self.y_pred
            .expect("y_pred must be materialized before computing rate metrics")
    }

    fn validate(&self, row: usize) -> Result<()> {
        if let Some(s) = self.y_score {
            if !(0.0..=1.0).contains(&s) || s.is_nan() {
                return Err(AuditError::row(row, "y_score", format!("score {s} outside [0, 1]")));
            }
        }
        if self.y_score.is_none() && self.y_pred.is_none() {
            return Err(AuditError::row(
                row,
                "y_score",
                "record has neither a score nor a hard prediction",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Error,
    UnknownCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateColumn {
    pub name: String,
    pub kind: CovariateKind,
}

fn default_y_true() -> String {
    "y_true".to_string()
}

fn default_unknown_label() -> String {
    "Unknown".to_string()
}

/// Declared column roles for a tabular input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default = "default_y_true")]
    pub y_true: String,
    #[serde(default)]
    pub y_score: Option<String>,
    #[serde(default)]
    pub y_pred: Option<String>,
    pub attributes: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<CovariateColumn>,
    #[serde(default)]
    pub missing_policy: MissingPolicy,
    #[serde(default = "default_unknown_label")]
    pub unknown_label: String,
}

impl ColumnSpec {
    pub fn new(attributes: &[&str]) -> Self {
        ColumnSpec {
            id: None,
            y_true: default_y_true(),
            y_score: Some("y_score".into()),
            y_pred: None,
            attributes: attributes.iter().map(|s| s.to_string()).collect(),
            covariates: Vec::new(),
            missing_policy: MissingPolicy::Error,
            unknown_label: default_unknown_label(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_score.is_none() && self.y_pred.is_none() {
            return Err(AuditError::config(
                "column declarations need at least one of y_score / y_pred",
            ));
        }
        if self.attributes.is_empty() {
            return Err(AuditError::config("at least one attribute column is required"));
        }
        let mut seen = BTreeSet::new();
        let roles = self
            .id
            .iter()
            .chain(std::iter::once(&self.y_true))
            .chain(self.y_score.iter())
            .chain(self.y_pred.iter())
            .chain(self.attributes.iter())
            .chain(self.covariates.iter().map(|c| &c.name));
        for name in roles {
            if !seen.insert(name.as_str()) {
                return Err(AuditError::config(format!("column `{name}` is declared twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    pub name: String,
    /// Observed categories, sorted.
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateDecl {
    pub name: String,
    pub kind: CovariateKind,
    /// Sorted vocabulary for categorical covariates; empty for numeric ones.
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSchema {
    pub columns: ColumnSpec,
    pub attributes: Vec<AttributeVocabulary>,
    pub covariates: Vec<CovariateDecl>,
}

impl CohortSchema {
    pub fn attribute_position(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> InputFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => InputFormat::Jsonl,
            _ => InputFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub format: Option<InputFormat>,
    pub rows: usize,
}

/// An immutable, validated set of prediction records.
#[derive(Debug, Clone)]
pub struct AuditCohort {
    records: Vec<PredictionRecord>,
    schema: CohortSchema,
    provenance: Provenance,
}

impl AuditCohort {
    /// Builds a cohort from in-memory records, validating every record and
    /// deriving category vocabularies from the observed values.
    pub fn from_records(
        records: Vec<PredictionRecord>,
        columns: ColumnSpec,
        source: impl Into<String>,
    ) -> Result<Self> {
        columns.validate()?;
        if records.is_empty() {
            return Err(AuditError::validation("cohort has no records"));
        }
        let n_attr = columns.attributes.len();
        let n_cov = columns.covariates.len();
        let mut attr_sets: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); n_attr];
        let mut cov_sets: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); n_cov];
        for (i, rec) in records.iter().enumerate() {
            let row = i + 1;
            rec.validate(row)?;
            if rec.attributes.len() != n_attr {
                return Err(AuditError::row(row, "attributes", "attribute count does not match schema"));
            }
            if rec.covariates.len() != n_cov {
                return Err(AuditError::row(row, "covariates", "covariate count does not match schema"));
            }
            for (set, value) in attr_sets.iter_mut().zip(&rec.attributes) {
                set.insert(value);
            }
            for (j, value) in rec.covariates.iter().enumerate() {
                let decl = &columns.covariates[j];
                match (decl.kind, value) {
                    (CovariateKind::Numeric, CovariateValue::Numeric(v)) if v.is_finite() => {}
                    (CovariateKind::Categorical, CovariateValue::Category(c)) => {
                        cov_sets[j].insert(c);
                    }
                    _ => {
                        return Err(AuditError::row(row, &decl.name, "covariate value does not match its declared kind"))
                    }
                }
            }
        }
        let attributes = columns
            .attributes
            .iter()
            .zip(attr_sets)
            .map(|(name, set)| AttributeVocabulary {
                name: name.clone(),
                categories: set.into_iter().map(String::from).collect(),
            })
            .collect();
        let covariates = columns
            .covariates
            .iter()
            .zip(cov_sets)
            .map(|(c, set)| CovariateDecl {
                name: c.name.clone(),
                kind: c.kind,
                categories: set.into_iter().map(String::from).collect(),
            })
            .collect();
        let rows = records.len();
        Ok(AuditCohort {
            records,
            schema: CohortSchema {
                columns,
                attributes,
                covariates,
            },
            provenance: Provenance {
                source: source.into(),
                format: None,
                rows,
            },
        })
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn schema(&self) -> &CohortSchema {
        &self.schema
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_scores(&self) -> bool {
        self.records.iter().any(|r| r.y_score.is_some())
    }

    pub fn predictions_materialized(&self) -> bool {
        self.records.iter().all(|r| r.y_pred.is_some())
    }

    /// Positions of the axis attributes inside each record's attribute list.
    pub fn axis_positions(&self, axis: &GroupingAxis) -> Result<Vec<usize>> {
        axis.attributes
            .iter()
            .map(|name| {
                self.schema.attribute_position(name).ok_or_else(|| {
                    AuditError::validation(format!(
                        "axis `{}` uses attribute `{name}` which the cohort does not declare",
                        axis.name
                    ))
                })
            })
            .collect()
    }

    pub fn subgroup_of(&self, record: &PredictionRecord, axis: &GroupingAxis, positions: &[usize]) -> SubgroupKey {
        SubgroupKey {
            axis: axis.name.clone(),
            categories: positions.iter().map(|&p| record.attributes[p].clone()).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Loads and validates a cohort from CSV or JSON lines.
pub fn load_cohort(path: &Path, format: Option<InputFormat>, columns: &ColumnSpec) -> Result<AuditCohort> {
    columns.validate()?;
    let format = format.unwrap_or_else(|| InputFormat::from_path(path));
    let file = File::open(path).map_err(|e| AuditError::io(path, e))?;
    let mut cohort = match format {
        InputFormat::Csv => read_csv(file, columns, &path.display().to_string())?,
        InputFormat::Jsonl => read_jsonl(BufReader::new(file), columns, &path.display().to_string())?,
    };
    cohort.provenance.format = Some(format);
    Ok(cohort)
}

/// Reads CSV (header row required) from any reader.
pub fn read_csv<R: Read>(reader: R, columns: &ColumnSpec, source: &str) -> Result<AuditCohort> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| AuditError::validation(format!("cannot read CSV header: {e}")))?
        .clone();
    let index_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| AuditError::validation(format!("missing column `{name}`")))
    };
    let layout = ColumnLayout::resolve(columns, index_of)?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| AuditError::row(row_no, "*", format!("malformed CSV row: {e}")))?;
        let cell = |idx: usize| -> Option<&str> {
            row.get(idx).map(str::trim).filter(|s| !s.is_empty())
        };
        records.push(layout.parse(columns, row_no, |idx| cell(idx).map(RawCell::Text))?);
    }
    AuditCohort::from_records(records, columns.clone(), source)
}

/// Reads JSON lines (one object per non-blank line).
pub fn read_jsonl<R: BufRead>(reader: R, columns: &ColumnSpec, source: &str) -> Result<AuditCohort> {
    let mut records = Vec::new();
    let names = JsonLayout::names(columns);
    let layout = ColumnLayout::positional(columns);
    let keys = layout_keys(columns);
    // Column checks run against the first object; later lines report per-row.
    let mut layout_checked = false;
    for (i, line) in reader.lines().enumerate() {
        let row_no = i + 1;
        let line = line.map_err(|e| AuditError::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| AuditError::row(row_no, "*", format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| AuditError::row(row_no, "*", "line is not a JSON object"))?;
        if !layout_checked {
            for name in &names.required {
                if !obj.contains_key(*name) {
                    return Err(AuditError::validation(format!("missing column `{name}`")));
                }
            }
            layout_checked = true;
        }
        records.push(layout.parse(columns, row_no, |idx| {
            let v = obj.get(keys[idx].as_str())?;
            match v {
                Value::Null => None,
                Value::String(s) if s.trim().is_empty() => None,
                Value::String(s) => Some(RawCell::Text(s.trim())),
                Value::Number(n) => n.as_f64().map(RawCell::Number),
                Value::Bool(b) => Some(RawCell::Number(if *b { 1.0 } else { 0.0 })),
                _ => Some(RawCell::Invalid),
            }
        })?);
    }
    if records.is_empty() {
        return Err(AuditError::validation("input contains no records"));
    }
    AuditCohort::from_records(records, columns.clone(), source)
}

struct JsonLayout<'a> {
    required: Vec<&'a str>,
}

impl<'a> JsonLayout<'a> {
    fn names(columns: &'a ColumnSpec) -> Self {
        let mut required = vec![columns.y_true.as_str()];
        required.extend(columns.y_score.as_deref());
        required.extend(columns.y_pred.as_deref());
        if columns.missing_policy == MissingPolicy::Error {
            required.extend(columns.attributes.iter().map(String::as_str));
        }
        required.extend(columns.covariates.iter().map(|c| c.name.as_str()));
        JsonLayout { required }
    }
}

/// Column names in positional order used by [`ColumnLayout::positional`].
fn layout_keys(columns: &ColumnSpec) -> Vec<String> {
    let mut keys = Vec::new();
    keys.push(columns.id.clone().unwrap_or_default());
    keys.push(columns.y_true.clone());
    keys.push(columns.y_score.clone().unwrap_or_default());
    keys.push(columns.y_pred.clone().unwrap_or_default());
    keys.extend(columns.attributes.iter().cloned());
    keys.extend(columns.covariates.iter().map(|c| c.name.clone()));
    keys
}

enum RawCell<'a> {
    Text(&'a str),
    Number(f64),
    Invalid,
}

impl RawCell<'_> {
    fn as_f64(&self) -> Option<f64> {
        match self {
            RawCell::Text(s) => s.parse().ok(),
            RawCell::Number(v) => Some(*v),
            RawCell::Invalid => None,
        }
    }

    fn as_binary(&self) -> Option<bool> {
        match self {
            RawCell::Text("0") | RawCell::Text("0.0") => Some(false),
            RawCell::Text("1") | RawCell::Text("1.0") => Some(true),
            RawCell::Number(v) if *v == 0.0 => Some(false),
            RawCell::Number(v) if *v == 1.0 => Some(true),
            _ => None,
        }
    }

    fn as_string(&self) -> Option<String> {
        match self {
            RawCell::Text(s) => Some(s.to_string()),
            RawCell::Number(v) => Some(v.to_string()),
            RawCell::Invalid => None,
        }
    }
}

/// Source-column index for each record role.
struct ColumnLayout {
    id: Option<usize>,
    y_true: usize,
    y_score: Option<usize>,
    y_pred: Option<usize>,
    attributes: Vec<usize>,
    covariates: Vec<usize>,
}

impl ColumnLayout {
    fn resolve(columns: &ColumnSpec, mut index_of: impl FnMut(&str) -> Result<usize>) -> Result<Self> {
        Ok(ColumnLayout {
            id: columns.id.as_deref().map(&mut index_of).transpose()?,
            y_true: index_of(&columns.y_true)?,
            y_score: columns.y_score.as_deref().map(&mut index_of).transpose()?,
            y_pred: columns.y_pred.as_deref().map(&mut index_of).transpose()?,
            attributes: columns
                .attributes
                .iter()
                .map(|a| index_of(a))
                .collect::<Result<_>>()?,
            covariates: columns
                .covariates
                .iter()
                .map(|c| index_of(&c.name))
                .collect::<Result<_>>()?,
        })
    }

    fn positional(columns: &ColumnSpec) -> Self {
        let n_attr = columns.attributes.len();
        let n_cov = columns.covariates.len();
        ColumnLayout {
            id: columns.id.as_ref().map(|_| 0),
            y_true: 1,
            y_score: columns.y_score.as_ref().map(|_| 2),
            y_pred: columns.y_pred.as_ref().map(|_| 3),
            attributes: (4..4 + n_attr).collect(),
            covariates: (4 + n_attr..4 + n_attr + n_cov).collect(),
        }
    }

    fn parse<'a>(
        &self,
        columns: &ColumnSpec,
        row: usize,
        cell: impl Fn(usize) -> Option<RawCell<'a>>,
    ) -> Result<PredictionRecord> {
        let id = match self.id {
            Some(idx) => cell(idx)
                .and_then(|c| c.as_string())
                .ok_or_else(|| AuditError::row(row, columns.id.as_deref().unwrap_or("id"), "missing id"))?,
            None => row.to_string(),
        };
        let y_true = cell(self.y_true)
            .ok_or_else(|| AuditError::row(row, &columns.y_true, "missing label"))?
            .as_binary()
            .ok_or_else(|| AuditError::row(row, &columns.y_true, "label must be 0 or 1"))?;
        let y_score = match self.y_score {
            Some(idx) => match cell(idx) {
                Some(c) => {
                    let name = columns.y_score.as_deref().unwrap_or_default();
                    let v = c
                        .as_f64()
                        .ok_or_else(|| AuditError::row(row, name, "score is not a number"))?;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(AuditError::row(row, name, format!("score {v} outside [0, 1]")));
                    }
                    Some(v)
                }
                None => None,
            },
            None => None,
        };
        let y_pred = match self.y_pred {
            Some(idx) => match cell(idx) {
                Some(c) => Some(c.as_binary().ok_or_else(|| {
                    AuditError::row(row, columns.y_pred.as_deref().unwrap_or_default(), "prediction must be 0 or 1")
                })?),
                None => None,
            },
            None => None,
        };
        let mut attributes = Vec::with_capacity(self.attributes.len());
        for (&idx, name) in self.attributes.iter().zip(&columns.attributes) {
            let value = match cell(idx).and_then(|c| c.as_string()) {
                Some(v) => v,
                None => match columns.missing_policy {
                    MissingPolicy::Error => {
                        return Err(AuditError::row(row, name, "missing attribute value"))
                    }
                    MissingPolicy::UnknownCategory => columns.unknown_label.clone(),
                },
            };
            attributes.push(value);
        }
        let mut covariates = Vec::with_capacity(self.covariates.len());
        for (&idx, decl) in self.covariates.iter().zip(&columns.covariates) {
            let raw = cell(idx).ok_or_else(|| AuditError::row(row, &decl.name, "missing covariate value"))?;
            let value = match decl.kind {
                CovariateKind::Numeric => CovariateValue::Numeric(
                    raw.as_f64()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| AuditError::row(row, &decl.name, "covariate is not a finite number"))?,
                ),
                CovariateKind::Categorical => CovariateValue::Category(
                    raw.as_string()
                        .ok_or_else(|| AuditError::row(row, &decl.name, "covariate is not a category"))?,
                ),
            };
            covariates.push(value);
        }
        let rec = PredictionRecord {
            id,
            y_true,
            y_score,
            y_pred,
            attributes,
            covariates,
        };
        rec.validate(row)?;
        Ok(rec)
    }
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

/// Column names used when writing a cohort back out.
fn output_columns(columns: &ColumnSpec) -> ColumnSpec {
    let mut out = columns.clone();
    if out.id.is_none() {
        out.id = Some("id".into());
    }
    if out.y_score.is_none() {
        out.y_score = Some("y_score".into());
    }
    if out.y_pred.is_none() {
        out.y_pred = Some("y_pred".into());
    }
    out
}

/// Writes the cohort as CSV. Reloading with [`AuditCohort::output_columns`]
/// yields identical records.
pub fn write_cohort_csv<W: Write>(cohort: &AuditCohort, writer: W) -> Result<()> {
    let cols = output_columns(&cohort.schema.columns);
    let mut w = csv::Writer::from_writer(writer);
    let header = layout_keys(&cols);
    let to_err = |e: csv::Error| AuditError::validation(format!("CSV write failed: {e}"));
    w.write_record(&header).map_err(to_err)?;
    for rec in &cohort.records {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(rec.id.clone());
        row.push(u8::from(rec.y_true).to_string());
        row.push(rec.y_score.map(|s| s.to_string()).unwrap_or_default());
        row.push(rec.y_pred.map(|p| u8::from(p).to_string()).unwrap_or_default());
        row.extend(rec.attributes.iter().cloned());
        row.extend(rec.covariates.iter().map(|c| match c {
            CovariateValue::Numeric(v) => v.to_string(),
            CovariateValue::Category(s) => s.clone(),
        }));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| AuditError::io(PathBuf::from("<cohort csv>"), e))?;
    Ok(())
}

/// Writes the cohort as JSON lines with the same column names as the CSV.
pub fn write_cohort_jsonl<W: Write>(cohort: &AuditCohort, mut writer: W) -> Result<()> {
    let cols = output_columns(&cohort.schema.columns);
    let io_err = |e| AuditError::io(PathBuf::from("<cohort jsonl>"), e);
    for rec in &cohort.records {
        let mut obj = serde_json::Map::new();
        obj.insert(cols.id.clone().unwrap(), Value::from(rec.id.clone()));
        obj.insert(cols.y_true.clone(), Value::from(u8::from(rec.y_true)));
        obj.insert(cols.y_score.clone().unwrap(), rec.y_score.map(Value::from).unwrap_or(Value::Null));
        obj.insert(
            cols.y_pred.clone().unwrap(),
            rec.y_pred.map(|p| Value::from(u8::from(p))).unwrap_or(Value::Null),
        );
        for (name, v) in cols.attributes.iter().zip(&rec.attributes) {
            obj.insert(name.clone(), Value::from(v.clone()));
        }
        for (decl, v) in cols.covariates.iter().zip(&rec.covariates) {
            let value = match v {
                CovariateValue::Numeric(x) => Value::from(*x),
                CovariateValue::Category(s) => Value::from(s.clone()),
            };
            obj.insert(decl.name.clone(), value);
        }
        serde_json::to_writer(&mut writer, &obj)
            .map_err(|e| AuditError::validation(format!("JSON write failed: {e}")))?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    Ok(())
}

impl AuditCohort {
    /// Column declarations matching what [`write_cohort_csv`] emits.
    pub fn output_columns(&self) -> ColumnSpec {
        output_columns(&self.schema.columns)
    }
}

// ---------------------------------------------------------------------------
// Thresholding
// ---------------------------------------------------------------------------

/// Decision rule turning scores into hard predictions (score ≥ threshold → 1).
#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdRule {
    Global(f64),
    PerGroup {
        axis: GroupingAxis,
        thresholds: BTreeMap<SubgroupKey, f64>,
        /// Applies to records whose subgroup has no table entry.
        fallback: f64,
    },
}

/// Materializes `y_pred` from scores. Existing predictions are kept unless
/// `recompute` is set.
pub fn derive_predictions(cohort: &AuditCohort, rule: &ThresholdRule, recompute: bool) -> Result<AuditCohort> {
    let check = |t: f64| -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(AuditError::config(format!("threshold {t} outside [0, 1]")))
        }
    };
    let positions = match rule {
        ThresholdRule::Global(t) => {
            check(*t)?;
            None
        }
        ThresholdRule::PerGroup {
            axis,
            thresholds,
            fallback,
        } => {
            check(*fallback)?;
            for t in thresholds.values() {
                check(*t)?;
            }
            Some(cohort.axis_positions(axis)?)
        }
    };
    let mut records = cohort.records.clone();
    for (i, rec) in records.iter_mut().enumerate() {
        if rec.y_pred.is_some() && !recompute {
            continue;
        }
        let Some(score) = rec.y_score else {
            if rec.y_pred.is_some() {
                continue;
            }
            return Err(AuditError::row(i + 1, "y_score", "record has neither a score nor a hard prediction"));
        };
        let threshold = match (rule, &positions) {
            (ThresholdRule::Global(t), _) => *t,
            (
                ThresholdRule::PerGroup {
                    axis,
                    thresholds,
                    fallback,
                },
                Some(pos),
            ) => {
                let key = cohort.subgroup_of(rec, axis, pos);
                thresholds.get(&key).copied().unwrap_or(*fallback)
            }
            _ => unreachable!(),
        };
        rec.y_pred = Some(score >= threshold);
    }
    Ok(AuditCohort {
        records,
        schema: cohort.schema.clone(),
        provenance: cohort.provenance.clone(),
    })
}

// ---------------------------------------------------------------------------
// Axes, subgroups, masking
// ---------------------------------------------------------------------------

/// A demographic grouping: one attribute, or an intersection of several.
///
/// Attribute names are kept sorted so subgroup keys are canonical.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupingAxis {
    pub name: String,
    pub attributes: Vec<String>,
}

impl GroupingAxis {
    pub fn new<S: AsRef<str>>(name: impl Into<String>, attributes: &[S]) -> Result<Self> {
        if attributes.is_empty() {
            return Err(AuditError::config("a grouping axis needs at least one attribute"));
        }
        let mut attrs: Vec<String> = attributes.iter().map(|s| s.as_ref().to_string()).collect();
        attrs.sort();
        if attrs.windows(2).any(|w| w[0] == w[1]) {
            return Err(AuditError::config("a grouping axis lists the same attribute twice"));
        }
        Ok(GroupingAxis {
            name: name.into(),
            attributes: attrs,
        })
    }

    /// Axis named after its attributes (`race`, `gender x race`).
    pub fn from_attributes<S: AsRef<str>>(attributes: &[S]) -> Result<Self> {
        let mut axis = GroupingAxis::new("", attributes)?;
        axis.name = axis.attributes.join(INTERSECTION_SEPARATOR);
        Ok(axis)
    }

    pub fn single(attribute: &str) -> Self {
        GroupingAxis {
            name: attribute.to_string(),
            attributes: vec![attribute.to_string()],
        }
    }

    pub fn is_intersectional(&self) -> bool {
        self.attributes.len() > 1
    }
}

/// One concrete cell of a grouping axis.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubgroupKey {
    pub axis: String,
    /// Categories aligned with the axis's (sorted) attribute names.
    pub categories: Vec<String>,
}

impl SubgroupKey {
    pub fn new<S: AsRef<str>>(axis: &GroupingAxis, categories: &[S]) -> Self {
        SubgroupKey {
            axis: axis.name.clone(),
            categories: categories.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    pub fn label(&self) -> String {
        self.categories.join(INTERSECTION_SEPARATOR)
    }
}

impl fmt::Display for SubgroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Counts of every observed category combination on `axis`. Combinations that
/// never occur are not materialized.
pub fn enumerate_subgroups(cohort: &AuditCohort, axis: &GroupingAxis) -> Result<BTreeMap<SubgroupKey, usize>> {
    let positions = cohort.axis_positions(axis)?;
    let mut counts = BTreeMap::new();
    for rec in &cohort.records {
        *counts.entry(cohort.subgroup_of(rec, axis, &positions)).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Minimum reportable cell size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingPolicy {
    #[serde(default = "MaskingPolicy::default_n_min")]
    pub n_min: usize,
}

impl MaskingPolicy {
    fn default_n_min() -> usize {
        20
    }
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy { n_min: 20 }
    }
}

/// Result of masking: masked keys carry no count.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingOutcome {
    pub qualifying: Vec<SubgroupKey>,
    pub masked: Vec<SubgroupKey>,
}

pub fn apply_masking(counts: &BTreeMap<SubgroupKey, usize>, policy: &MaskingPolicy) -> MaskingOutcome {
    let (qualifying, masked): (Vec<_>, Vec<_>) = counts.iter().partition(|(_, &n)| n >= policy.n_min);
    MaskingOutcome {
        qualifying: qualifying.into_iter().map(|(k, _)| k.clone()).collect(),
        masked: masked.into_iter().map(|(k, _)| k.clone()).collect(),
    }
}

/// Per-record group membership restricted to the qualifying subgroups of an
/// axis. Records in masked subgroups map to `None`.
#[derive(Debug, Clone)]
pub struct AxisIndex {
    pub axis: GroupingAxis,
    pub keys: Vec<SubgroupKey>,
    pub assignment: Vec<Option<usize>>,
}

impl AxisIndex {
    pub fn build(cohort: &AuditCohort, axis: &GroupingAxis, qualifying: &[SubgroupKey]) -> Result<Self> {
        let positions = cohort.axis_positions(axis)?;
        let mut keys = qualifying.to_vec();
        keys.sort();
        keys.dedup();
        let lookup: BTreeMap<&SubgroupKey, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let assignment = cohort
            .records
            .iter()
            .map(|rec| lookup.get(&cohort.subgroup_of(rec, axis, &positions)).copied())
            .collect();
        Ok(AxisIndex {
            axis: axis.clone(),
            keys,
            assignment,
        })
    }

    /// Record indices of each qualifying group.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.keys.len()];
        for (i, g) in self.assignment.iter().enumerate() {
            if let Some(g) = g {
                out[*g].push(i);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ColumnSpec {
        ColumnSpec::new(&["race", "gender"])
    }

    fn load(text: &str) -> Result<AuditCohort> {
        read_csv(text.as_bytes(), &spec(), "inline")
    }

    #[test]
    fn loads_minimal_csv() {
        let c = load("y_true,y_score,race,gender\n1,0.8,White,Female\n0,0.2,Asian,Male\n").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.records()[1].attributes, vec!["Asian", "Male"]);
        assert_eq!(c.records()[0].id, "1");
    }

    #[test]
    fn score_out_of_range_names_row() {
        let err = load("y_true,y_score,race,gender\n1,0.8,White,Female\n0,1.3,Asian,Male\n").unwrap_err();
        match err {
            AuditError::Row { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y_score");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_attribute_column() {
        let err = load("y_true,y_score,gender\n1,0.8,Female\n").unwrap_err();
        assert!(err.to_string().contains("`race`"), "{err}");
    }

    #[test]
    fn empty_file_rejected() {
        assert!(load("y_true,y_score,race,gender\n").is_err());
        assert!(load("").is_err());
    }

    #[test]
    fn missing_attribute_policy() {
        let text = "y_true,y_score,race,gender\n1,0.8,,Female\n";
        assert!(load(text).is_err());
        let mut cols = spec();
        cols.missing_policy = MissingPolicy::UnknownCategory;
        let c = read_csv(text.as_bytes(), &cols, "inline").unwrap();
        assert_eq!(c.records()[0].attributes[0], "Unknown");
        assert_eq!(c.schema().attributes[0].categories, vec!["Unknown"]);
    }

    #[test]
    fn jsonl_matches_csv() {
        let csv = load("y_true,y_score,race,gender\n1,0.8,White,Female\n0,0.25,Asian,Male\n").unwrap();
        let jsonl = "{\"y_true\":1,\"y_score\":0.8,\"race\":\"White\",\"gender\":\"Female\"}\n\n\
                     {\"y_true\":0,\"y_score\":0.25,\"race\":\"Asian\",\"gender\":\"Male\"}\n";
        let j = read_jsonl(jsonl.as_bytes(), &spec(), "inline").unwrap();
        assert_eq!(j.records()[0].y_score, csv.records()[0].y_score);
        assert_eq!(j.records()[1].attributes, csv.records()[1].attributes);
        let bad = "{\"y_true\":1,\"y_score\":0.8,\"gender\":\"Female\"}\n";
        assert!(read_jsonl(bad.as_bytes(), &spec(), "inline").is_err());
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let c = load("y_true,y_score,race,gender\n1,0.5,A,F\n0,0.49,A,F\n").unwrap();
        let d = derive_predictions(&c, &ThresholdRule::Global(0.5), false).unwrap();
        assert_eq!(d.records()[0].y_pred, Some(true));
        assert_eq!(d.records()[1].y_pred, Some(false));
    }

    #[test]
    fn per_group_thresholds() {
        let cols = ColumnSpec::new(&["g"]);
        let c = read_csv("y_true,y_score,g\n1,0.5,g1\n1,0.5,g2\n0,0.5,g3\n".as_bytes(), &cols, "x").unwrap();
        let axis = GroupingAxis::single("g");
        let mut table = BTreeMap::new();
        table.insert(SubgroupKey::new(&axis, &["g1"]), 0.3);
        table.insert(SubgroupKey::new(&axis, &["g2"]), 0.7);
        let rule = ThresholdRule::PerGroup {
            axis,
            thresholds: table,
            fallback: 0.6,
        };
        let d = derive_predictions(&c, &rule, false).unwrap();
        let preds: Vec<_> = d.records().iter().map(|r| r.y_pred.unwrap()).collect();
        assert_eq!(preds, vec![true, false, false]);
    }

    #[test]
    fn existing_predictions_preserved_unless_recompute() {
        let mut cols = spec();
        cols.y_pred = Some("y_pred".into());
        let c = read_csv("y_true,y_score,y_pred,race,gender\n1,0.9,0,A,F\n".as_bytes(), &cols, "x").unwrap();
        let kept = derive_predictions(&c, &ThresholdRule::Global(0.5), false).unwrap();
        assert_eq!(kept.records()[0].y_pred, Some(false));
        let redone = derive_predictions(&c, &ThresholdRule::Global(0.5), true).unwrap();
        assert_eq!(redone.records()[0].y_pred, Some(true));
    }

    #[test]
    fn enumerates_observed_cells_only() {
        let c = load(
            "y_true,y_score,race,gender\n1,0.8,White,Female\n0,0.2,Asian,Male\n0,0.3,White,Female\n",
        )
        .unwrap();
        let axis = GroupingAxis::from_attributes(&["race", "gender"]).unwrap();
        assert_eq!(axis.name, "gender x race");
        let counts = enumerate_subgroups(&c, &axis).unwrap();
        assert_eq!(counts.len(), 2);
        assert_eq!(counts[&SubgroupKey::new(&axis, &["Female", "White"])], 2);
        assert!(!counts.contains_key(&SubgroupKey::new(&axis, &["Male", "White"])));
    }

    #[test]
    fn six_intersectional_keys() {
        let mut text = String::from("y_true,y_score,race,gender\n");
        for race in ["White", "Black or African American", "Asian"] {
            for g in ["Female", "Male"] {
                text.push_str(&format!("0,0.1,{race},{g}\n"));
            }
        }
        let c = load(&text).unwrap();
        let axis = GroupingAxis::from_attributes(&["race", "gender"]).unwrap();
        let counts = enumerate_subgroups(&c, &axis).unwrap();
        assert_eq!(counts.len(), 6);
        assert!(counts.keys().any(|k| k.categories[1] == "Black or African American"));
    }

    #[test]
    fn masking_thresholds() {
        let axis = GroupingAxis::single("race");
        let mut counts = BTreeMap::new();
        counts.insert(SubgroupKey::new(&axis, &["Asian"]), 43);
        counts.insert(SubgroupKey::new(&axis, &["Other"]), 19);
        let out = apply_masking(&counts, &MaskingPolicy { n_min: 20 });
        assert_eq!(out.qualifying, vec![SubgroupKey::new(&axis, &["Asian"])]);
        assert_eq!(out.masked, vec![SubgroupKey::new(&axis, &["Other"])]);
        let all = apply_masking(&counts, &MaskingPolicy { n_min: 0 });
        assert_eq!(all.qualifying.len(), 2);
    }

    #[test]
    fn axis_validation() {
        assert!(GroupingAxis::new("x", &[] as &[&str]).is_err());
        assert!(GroupingAxis::new("x", &["a", "a"]).is_err());
        let c = load("y_true,y_score,race,gender\n1,0.8,White,Female\n").unwrap();
        assert!(enumerate_subgroups(&c, &GroupingAxis::single("age")).is_err());
    }
}
