//! Random cohorts and brute-force reference computations for tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fairaudit::cohort::{ColumnSpec, GroupingAxis, PredictionRecord, SubgroupKey};
use fairaudit::observational::{AxisPanel, ConfusionTable, FairnessGapSet, Gap, GroupStats, PerformanceSummary};
use fairaudit::report::{AuditReport, AxisSummary, CohortSummary, ThresholdMode, ThresholdSummary, SCHEMA_VERSION};
use fairaudit::AuditCohort;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ATTRS: [&str; 3] = ["race", "gender", "age"];

/// Random cohort with `n` records, `k` attributes of 2–3 categories each,
/// hard predictions and scores on a coarse grid (so ties occur).
pub fn random_cohort(seed: u64, n: usize, k: usize) -> AuditCohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels: Vec<usize> = (0..k).map(|_| rng.random_range(2..=3)).collect();
    let records = (0..n)
        .map(|i| {
            let y = rng.random_bool(0.4);
            PredictionRecord {
                id: i.to_string(),
                y_true: y,
                y_score: Some(rng.random_range(0..=20) as f64 / 20.0),
                y_pred: Some(rng.random_bool(if y { 0.7 } else { 0.3 })),
                attributes: levels.iter().map(|&l| format!("c{}", rng.random_range(0..l))).collect(),
                covariates: vec![],
            }
        })
        .collect();
    let mut cols = ColumnSpec::new(&ATTRS[..k]);
    cols.y_pred = Some("y_pred".into());
    AuditCohort::from_records(records, cols, "random").unwrap()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct BruteCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl BruteCounts {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
    pub fn ppr(&self) -> f64 {
        (self.tp + self.fp) as f64 / self.n() as f64
    }
    pub fn tpr(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| self.tp as f64 / (self.tp + self.fn_) as f64)
    }
    pub fn fpr(&self) -> Option<f64> {
        (self.fp + self.tn > 0).then(|| self.fp as f64 / (self.fp + self.tn) as f64)
    }
}

/// Confusion counts keyed by the category tuple of `attrs` (given order).
pub fn brute_groups(cohort: &AuditCohort, attrs: &[&str]) -> BTreeMap<Vec<String>, BruteCounts> {
    let schema = cohort.schema();
    let pos: Vec<usize> = attrs.iter().map(|a| schema.attribute_position(a).unwrap()).collect();
    let mut out: BTreeMap<Vec<String>, BruteCounts> = BTreeMap::new();
    for r in cohort.records() {
        let key = pos.iter().map(|&p| r.attributes[p].clone()).collect();
        let c = out.entry(key).or_default();
        match (r.y_true, r.y_pred.unwrap()) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    out
}

pub fn brute_range(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.len() < 2 {
        return None;
    }
    let mut max = v[0];
    let mut min = v[0];
    for &x in &v {
        if x > max {
            max = x;
        }
        if x < min {
            min = x;
        }
    }
    Some(max - min)
}

/// (#{s₊ > s₋} + ½ #{s₊ = s₋}) / (n₊ n₋) over all pairs.
pub fn pair_auroc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let pos: Vec<f64> = labels.iter().zip(scores).filter(|p| *p.0).map(|p| *p.1).collect();
    let neg: Vec<f64> = labels.iter().zip(scores).filter(|p| !*p.0).map(|p| *p.1).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// One intersectional cell with exact confusion counts.
pub struct Cell<'a> {
    pub categories: &'a [&'a str],
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

/// Cohort with the exact confusion counts of `cells`; scores agree with the
/// predictions and vary slightly by record.
pub fn cohort_from_cells(attrs: &[&str], cells: &[Cell]) -> AuditCohort {
    let mut records = Vec::new();
    for cell in cells {
        let kinds = [
            (true, true, cell.tp),
            (true, false, cell.fn_),
            (false, true, cell.fp),
            (false, false, cell.tn),
        ];
        for (y, yhat, count) in kinds {
            for _ in 0..count {
                let i = records.len();
                let jitter = (i % 40) as f64 / 200.0;
                records.push(PredictionRecord {
                    id: format!("r{i}"),
                    y_true: y,
                    y_score: Some(if yhat { 0.55 + jitter } else { 0.05 + jitter }),
                    y_pred: Some(yhat),
                    attributes: cell.categories.iter().map(|c| c.to_string()).collect(),
                    covariates: vec![],
                });
            }
        }
    }
    let mut cols = ColumnSpec::new(attrs);
    cols.y_score = Some("y_score".into());
    cols.y_pred = Some("y_pred".into());
    AuditCohort::from_records(records, cols, "cells").unwrap()
}

fn gap(v: f64, key: &SubgroupKey) -> Gap {
    Gap {
        value: Some(v),
        contributing: vec![key.clone()],
        excluded: vec![],
    }
}

/// Report carrying the gap panel of the stroke-cohort layout example.
pub fn table_report() -> AuditReport {
    let axes: Vec<(GroupingAxis, [f64; 3])> = vec![
        (GroupingAxis::single("race"), [0.131, 0.101, 0.018]),
        (GroupingAxis::single("gender"), [0.015, 0.013, 0.032]),
        (GroupingAxis::from_attributes(&["race", "gender"]).unwrap(), [0.138, 0.103, 0.094]),
    ];
    let observational = axes
        .iter()
        .map(|(axis, g)| {
            let key = SubgroupKey::new(axis, &vec!["a"; axis.attributes.len()]);
            let stats = GroupStats::from_counts(key.clone(), 30, 10, 40, 20);
            AxisPanel {
                gaps: FairnessGapSet {
                    axis: axis.clone(),
                    dp_gap: gap(g[0], &key),
                    eo_fpr_gap: gap(g[1], &key),
                    eod_gap: gap(g[2], &key),
                    eo_max_gap: None,
                },
                table: ConfusionTable {
                    groups: vec![stats.clone()],
                    pooled: stats,
                },
            }
        })
        .collect();
    AuditReport {
        schema_version: SCHEMA_VERSION.into(),
        run_id: "fixture".into(),
        config: serde_json::json!({"name": "stroke"}),
        cohort: CohortSummary {
            name: "stroke".into(),
            records: 100,
            positives: 50,
            axes: axes
                .iter()
                .map(|(axis, _)| AxisSummary {
                    axis: axis.clone(),
                    n_min: 20,
                    subgroups: vec![],
                })
                .collect(),
        },
        thresholds: ThresholdSummary {
            mode: ThresholdMode::Global,
            tau: 0.5,
            recomputed: false,
            youden: None,
        },
        performance: PerformanceSummary {
            accuracy: 0.817,
            auroc: Some(0.759),
            per_group_auroc: vec![],
        },
        observational,
        counterfactual: None,
        warnings: vec![],
    }
}
