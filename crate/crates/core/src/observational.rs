//! Per-subgroup confusion statistics, range-based fairness gaps, model
//! performance and per-group Youden thresholds.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cohort::{AuditCohort, AxisIndex, GroupingAxis, MaskingOutcome, SubgroupKey};
use crate::error::{AuditError, Result};
use crate::stats;

/// Category label of the pooled entry in a [`ConfusionTable`].
pub const POOLED_LABEL: &str = "ALL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub key: SubgroupKey,
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ppr: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub accuracy: f64,
}

impl GroupStats {
    pub fn from_counts(key: SubgroupKey, tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let n = tp + fp + tn + fn_;
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let tpr = ratio(tp, tp + fn_);
        GroupStats {
            key,
            n,
            tp,
            fp,
            tn,
            fn_,
            ppr: ratio(tp + fp, n).unwrap_or(f64::NAN),
            tpr,
            fpr: ratio(fp, fp + tn),
            fnr: ratio(fn_, tp + fn_),
            accuracy: ratio(tp + tn, n).unwrap_or(f64::NAN),
        }
    }

    pub fn rate(&self, metric: RateMetric) -> Option<f64> {
        match metric {
            RateMetric::Ppr => (self.n > 0).then_some(self.ppr),
            RateMetric::Fpr => self.fpr,
            RateMetric::Tpr => self.tpr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMetric {
    Ppr,
    Fpr,
    Tpr,
}

/// Per-group statistics for one axis plus the pooled cohort entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub groups: Vec<GroupStats>,
    pub pooled: GroupStats,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

impl Counts {
    fn add(&mut self, y: bool, yhat: bool) {
        match (y, yhat) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }
}

/// Confusion counts for each qualifying subgroup of `axis`, in canonical key
/// order, plus the pooled entry over the whole cohort.
pub fn confusion_stats(cohort: &AuditCohort, axis: &GroupingAxis, qualifying: &[SubgroupKey]) -> Result<ConfusionTable> {
    if !cohort.predictions_materialized() {
        return Err(AuditError::validation("hard predictions must be derived before computing rates"));
    }
    let index = AxisIndex::build(cohort, axis, qualifying)?;
    let mut per_group = vec![Counts::default(); index.keys.len()];
    let mut pooled = Counts::default();
    for (rec, g) in cohort.records().iter().zip(&index.assignment) {
        let yhat = rec.prediction();
        pooled.add(rec.y_true, yhat);
        if let Some(g) = g {
            per_group[*g].add(rec.y_true, yhat);
        }
    }
    let groups = index
        .keys
        .iter()
        .zip(per_group)
        .map(|(k, c)| GroupStats::from_counts(k.clone(), c.tp, c.fp, c.tn, c.fn_))
        .collect();
    let pooled_key = SubgroupKey {
        axis: axis.name.clone(),
        categories: vec![POOLED_LABEL.to_string()],
    };
    Ok(ConfusionTable {
        groups,
        pooled: GroupStats::from_counts(pooled_key, pooled.tp, pooled.fp, pooled.tn, pooled.fn_),
    })
}

/// A range gap together with the groups that entered it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub value: Option<f64>,
    pub contributing: Vec<SubgroupKey>,
    /// Groups skipped because the rate's denominator was zero.
    pub excluded: Vec<SubgroupKey>,
}

/// max − min of `metric` over the groups where it is defined; undefined with
/// fewer than two such groups.
pub fn disparity_gap(stats: &[GroupStats], metric: RateMetric) -> Gap {
    let mut contributing = Vec::new();
    let mut excluded = Vec::new();
    let mut values = Vec::new();
    for s in stats {
        match s.rate(metric) {
            Some(v) => {
                contributing.push(s.key.clone());
                values.push(v);
            }
            None => excluded.push(s.key.clone()),
        }
    }
    Gap {
        value: stats::range(values),
        contributing,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessGapSet {
    pub axis: GroupingAxis,
    pub dp_gap: Gap,
    pub eo_fpr_gap: Gap,
    pub eod_gap: Gap,
    /// max(FPR gap, TPR gap), emitted only when requested.
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "present")]
    pub eo_max_gap: Option<Option<f64>>,
}

/// A present field, even `null`, deserializes to `Some`.
fn present<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<Option<f64>>, D::Error> {
    Option::<f64>::deserialize(d).map(Some)
}

impl FairnessGapSet {
    pub fn from_stats(axis: &GroupingAxis, stats: &[GroupStats], emit_eo_max: bool) -> Self {
        let dp_gap = disparity_gap(stats, RateMetric::Ppr);
        let eo_fpr_gap = disparity_gap(stats, RateMetric::Fpr);
        let eod_gap = disparity_gap(stats, RateMetric::Tpr);
        let eo_max_gap = emit_eo_max.then(|| match (eo_fpr_gap.value, eod_gap.value) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        });
        FairnessGapSet {
            axis: axis.clone(),
            dp_gap,
            eo_fpr_gap,
            eod_gap,
            eo_max_gap,
        }
    }
}

pub fn accuracy(cohort: &AuditCohort) -> Result<f64> {
    if !cohort.predictions_materialized() {
        return Err(AuditError::validation("hard predictions must be derived before computing accuracy"));
    }
    let correct = cohort.records().iter().filter(|r| r.prediction() == r.y_true).count();
    Ok(correct as f64 / cohort.len() as f64)
}

/// Mann–Whitney AUROC with midranks for tied scores.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<Option<f64>> {
    if labels.len() != scores.len() {
        return Err(AuditError::validation(format!(
            "auroc: {} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += midrank * pos_in_tie as f64;
        i = j;
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(Some(u / (n_pos_f * n_neg as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// Youden's J at the chosen threshold; absent for fallback entries.
    pub j: Option<f64>,
    /// True when the group lacked a class and inherited the global threshold.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoudenTable {
    pub global: ThresholdChoice,
    pub groups: BTreeMap<SubgroupKey, ThresholdChoice>,
}

/// Threshold maximizing TPR − FPR over the observed scores under the ≥
/// rule. Ties go to the largest threshold. `None` when a class is absent.
pub fn youden_threshold(labels: &[bool], scores: &[f64]) -> Option<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    // Sweep thresholds from high to low; after absorbing every record tied at
    // score t, the counts are those of the rule "score ≥ t".
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let j = tp as f64 / n_pos as f64 - fp as f64 / n_neg as f64;
        if best.map_or(true, |(_, bj)| j > bj) {
            best = Some((t, j));
        }
    }
    best
}

pub fn youden_thresholds(cohort: &AuditCohort, axis: &GroupingAxis, qualifying: &[SubgroupKey]) -> Result<YoudenTable> {
    let scored: Vec<_> = cohort
        .records()
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.y_score.map(|s| (i, r.y_true, s)))
        .collect();
    if scored.is_empty() {
        return Err(AuditError::validation("Youden thresholds need scores, but no record has one"));
    }
    let labels: Vec<bool> = scored.iter().map(|s| s.1).collect();
    let scores: Vec<f64> = scored.iter().map(|s| s.2).collect();
    let (gt, gj) = youden_threshold(&labels, &scores).ok_or_else(|| {
        AuditError::validation("Youden thresholds need both outcome classes among scored records")
    })?;
    let global = ThresholdChoice {
        threshold: gt,
        j: Some(gj),
        fallback: false,
    };
    let index = AxisIndex::build(cohort, axis, qualifying)?;
    let mut per_group: Vec<(Vec<bool>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); index.keys.len()];
    for &(i, y, s) in &scored {
        if let Some(g) = index.assignment[i] {
            per_group[g].0.push(y);
            per_group[g].1.push(s);
        }
    }
    let groups = index
        .keys
        .iter()
        .zip(per_group)
        .map(|(k, (y, s))| {
            let choice = match youden_threshold(&y, &s) {
                Some((t, j)) => ThresholdChoice {
                    threshold: t,
                    j: Some(j),
                    fallback: false,
                },
                None => ThresholdChoice {
                    threshold: gt,
                    j: None,
                    fallback: true,
                },
            };
            (k.clone(), choice)
        })
        .collect();
    Ok(YoudenTable { global, groups })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSummary {
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub per_group_auroc: Vec<AxisAuroc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisAuroc {
    pub axis: String,
    pub groups: Vec<GroupAuroc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAuroc {
    pub key: SubgroupKey,
    pub auroc: Option<f64>,
}

fn scored_pairs<'a>(records: impl Iterator<Item = &'a crate::cohort::PredictionRecord>) -> (Vec<bool>, Vec<f64>) {
    records.filter_map(|r| r.y_score.map(|s| (r.y_true, s))).unzip()
}

/// An axis paired with its masking outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisSelection {
    pub axis: GroupingAxis,
    pub masking: MaskingOutcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelOptions {
    /// Also emit the max(FPR gap, TPR gap) equalized-odds variant.
    #[serde(default)]
    pub emit_eo_max: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisPanel {
    pub gaps: FairnessGapSet,
    pub table: ConfusionTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessPanel {
    pub axes: Vec<AxisPanel>,
    pub performance: PerformanceSummary,
}

/// Gap sets for every axis (in the given order) plus pooled performance.
pub fn fairness_panel(cohort: &AuditCohort, selections: &[AxisSelection], options: PanelOptions) -> Result<FairnessPanel> {
    let mut axes = Vec::with_capacity(selections.len());
    let mut per_group_auroc = Vec::with_capacity(selections.len());
    for sel in selections {
        let table = confusion_stats(cohort, &sel.axis, &sel.masking.qualifying)?;
        let gaps = FairnessGapSet::from_stats(&sel.axis, &table.groups, options.emit_eo_max);
        let index = AxisIndex::build(cohort, &sel.axis, &sel.masking.qualifying)?;
        let groups = index
            .members()
            .iter()
            .zip(&index.keys)
            .map(|(members, key)| {
                let (y, s) = scored_pairs(members.iter().map(|&i| &cohort.records()[i]));
                auroc(&y, &s).map(|auroc| GroupAuroc { key: key.clone(), auroc })
            })
            .collect::<Result<Vec<_>>>()?;
        per_group_auroc.push(AxisAuroc {
            axis: sel.axis.name.clone(),
            groups,
        });
        axes.push(AxisPanel { gaps, table });
    }
    let (y, s) = scored_pairs(cohort.records().iter());
    let performance = PerformanceSummary {
        accuracy: accuracy(cohort)?,
        auroc: auroc(&y, &s)?,
        per_group_auroc,
    };
    Ok(FairnessPanel { axes, performance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{read_csv, ColumnSpec};

    fn key(c: &str) -> SubgroupKey {
        SubgroupKey {
            axis: "g".into(),
            categories: vec![c.into()],
        }
    }

    #[test]
    fn hand_counted_group() {
        let mut cols = ColumnSpec::new(&["g"]);
        cols.y_score = None;
        cols.y_pred = Some("y_pred".into());
        let c = read_csv("y_true,y_pred,g\n1,1,a\n0,1,a\n0,0,a\n".as_bytes(), &cols, "x").unwrap();
        let axis = GroupingAxis::single("g");
        let t = confusion_stats(&c, &axis, &[key("a")]).unwrap();
        let s = &t.groups[0];
        assert_eq!((s.tp, s.fp, s.tn, s.fn_), (1, 1, 1, 0));
        assert!((s.ppr - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.fnr, Some(0.0));
        let empty = confusion_stats(&c, &axis, &[]).unwrap();
        assert!(empty.groups.is_empty());
        assert_eq!(empty.pooled.n, 3);
    }

    #[test]
    fn all_negative_predictions() {
        let s = GroupStats::from_counts(key("a"), 0, 0, 5, 0);
        assert_eq!(s.ppr, 0.0);
        assert_eq!(s.fpr, Some(0.0));
        assert_eq!(s.tpr, None);
        let s = GroupStats::from_counts(key("a"), 0, 0, 5, 3);
        assert_eq!(s.tpr, Some(0.0));
    }

    #[test]
    fn gap_is_range() {
        let stats: Vec<_> = [(1, 1, 2), (1, 0, 4), (2, 0, 3)]
            .iter()
            .enumerate()
            .map(|(i, &(tp, fp, tn))| GroupStats::from_counts(key(&i.to_string()), tp, fp, tn, 0))
            .collect();
        // ppr = 0.5, 0.2, 0.4
        let g = disparity_gap(&stats, RateMetric::Ppr);
        assert!((g.value.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(g.contributing.len(), 3);
        let one = disparity_gap(&stats[..1], RateMetric::Ppr);
        assert_eq!(one.value, None);
        let same = vec![stats[0].clone(), stats[0].clone()];
        assert_eq!(disparity_gap(&same, RateMetric::Ppr).value, Some(0.0));
    }

    #[test]
    fn undefined_rate_excludes_group_from_that_metric_only() {
        let stats = vec![
            GroupStats::from_counts(key("a"), 1, 1, 1, 1),
            GroupStats::from_counts(key("b"), 0, 1, 1, 0),
            GroupStats::from_counts(key("c"), 2, 0, 2, 0),
        ];
        let tpr = disparity_gap(&stats, RateMetric::Tpr);
        assert_eq!(tpr.excluded, vec![key("b")]);
        assert_eq!(disparity_gap(&stats, RateMetric::Ppr).contributing.len(), 3);
    }

    #[test]
    fn auroc_examples() {
        let y = [false, true, false, true];
        assert_eq!(auroc(&y, &[0.1, 0.4, 0.5, 0.8]).unwrap(), Some(0.75));
        assert_eq!(auroc(&y, &[0.1, 0.9, 0.2, 0.8]).unwrap(), Some(1.0));
        assert_eq!(auroc(&y, &[0.3; 4]).unwrap(), Some(0.5));
        assert_eq!(auroc(&[true, true], &[0.1, 0.2]).unwrap(), None);
        assert!(auroc(&y, &[0.1]).is_err());
    }

    #[test]
    fn youden_examples() {
        let y = [false, true, false, true];
        let (t, j) = youden_threshold(&y, &[0.1, 0.4, 0.5, 0.8]).unwrap();
        assert_eq!(t, 0.8);
        assert!((j - 0.5).abs() < 1e-15);
        let (t, j) = youden_threshold(&y, &[0.1, 0.9, 0.2, 0.8]).unwrap();
        assert_eq!((t, j), (0.8, 1.0));
        let (t, j) = youden_threshold(&y, &[0.6; 4]).unwrap();
        assert_eq!((t, j), (0.6, 0.0));
    }

    #[test]
    fn youden_fallback_for_single_class_group() {
        let cols = ColumnSpec::new(&["g"]);
        let c = read_csv(
            "y_true,y_score,g\n0,0.1,a\n1,0.4,a\n0,0.5,a\n1,0.8,a\n1,0.3,b\n1,0.9,b\n".as_bytes(),
            &cols,
            "x",
        )
        .unwrap();
        let axis = GroupingAxis::single("g");
        let table = youden_thresholds(&c, &axis, &[key("a"), key("b")]).unwrap();
        assert_eq!(table.groups[&key("a")].threshold, 0.8);
        assert!(table.groups[&key("b")].fallback);
        assert_eq!(table.groups[&key("b")].threshold, table.global.threshold);
    }
}
