//! Seeded synthetic cohorts with closed-form expected metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZeroUsize;

use gauss_quad::GaussHermite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    AuditCohort, ColumnSpec, CovariateColumn, CovariateKind, CovariateValue, GroupingAxis, PredictionRecord,
    SubgroupKey,
};
use crate::error::{AuditError, Result};
use crate::stats::sigmoid;

/// Quadrature nodes for covariate-mediated expectations.
pub const QUADRATURE_NODES: usize = 96;

/// Name of the covariate column emitted for covariate-mediated specs.
pub const COVARIATE_NAME: &str = "z";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    /// One category per attribute, in `SynthSpec::attributes` order.
    pub categories: Vec<String>,
    pub size: usize,
    pub prevalence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fpr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_mean: Option<f64>,
}

/// Error probability sigmoid(intercept + slope·z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticLink {
    pub intercept: f64,
    pub slope: f64,
}

impl LogisticLink {
    fn at(&self, z: f64) -> f64 {
        sigmoid(self.intercept + self.slope * z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mechanism {
    /// Per-cell TPR and FPR of the simulated classifier.
    Direct,
    /// z ~ N(z_mean, 1) per cell; misses among `y = 1` follow `fnr`, false
    /// alarms among `y = 0` follow `fpr`. Links are shared by all cells.
    CovariateMediated { fnr: LogisticLink, fpr: LogisticLink },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub attributes: Vec<String>,
    pub cells: Vec<CellSpec>,
    pub mechanism: Mechanism,
    #[serde(default = "SynthSpec::default_threshold")]
    pub threshold: f64,
    /// Shrinks every score toward the threshold by this fraction, in [0, 1).
    #[serde(default)]
    pub miscalibration: f64,
    /// ε used for the oracle u-values.
    #[serde(default = "SynthSpec::default_epsilon")]
    pub epsilon: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn default_threshold() -> f64 {
        0.5
    }

    fn default_epsilon() -> f64 {
        0.10
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(AuditError::validation(format!("synth spec: {msg}")));
        if self.attributes.is_empty() {
            return invalid("at least one attribute is required".into());
        }
        if self.attributes.iter().collect::<BTreeSet<_>>().len() != self.attributes.len() {
            return invalid("attribute names must be distinct".into());
        }
        if self.cells.is_empty() {
            return invalid("at least one cell is required".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return invalid("threshold must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.miscalibration) {
            return invalid("miscalibration must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return invalid("epsilon must lie in [0, 1]".into());
        }
        if let Mechanism::CovariateMediated { fnr, fpr } = &self.mechanism {
            let finite = |l: &LogisticLink| l.intercept.is_finite() && l.slope.is_finite();
            if !finite(fnr) || !finite(fpr) {
                return invalid("link coefficients must be finite".into());
            }
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut seen = BTreeSet::new();
        for (i, cell) in self.cells.iter().enumerate() {
            let at = |msg: &str| invalid(format!("cell {i}: {msg}"));
            if cell.categories.len() != self.attributes.len() {
                return at("one category per attribute is required");
            }
            if !seen.insert(&cell.categories) {
                return at("duplicate cell");
            }
            if cell.size < 1 {
                return at("size must be ≥ 1");
            }
            if !unit(cell.prevalence) {
                return at("prevalence must lie in [0, 1]");
            }
            match &self.mechanism {
                Mechanism::Direct => match (cell.tpr, cell.fpr) {
                    (Some(t), Some(f)) if unit(t) && unit(f) => {}
                    (Some(_), Some(_)) => return at("tpr and fpr must lie in [0, 1]"),
                    _ => return at("direct mechanism needs tpr and fpr"),
                },
                Mechanism::CovariateMediated { .. } => match cell.z_mean {
                    Some(m) if m.is_finite() => {}
                    _ => return at("covariate-mediated mechanism needs a finite z_mean"),
                },
            }
        }
        Ok(())
    }

    fn mediated(&self) -> bool {
        matches!(self.mechanism, Mechanism::CovariateMediated { .. })
    }

    fn columns(&self) -> ColumnSpec {
        let attrs: Vec<&str> = self.attributes.iter().map(String::as_str).collect();
        let mut cols = ColumnSpec::new(&attrs);
        cols.id = Some("id".into());
        cols.y_pred = Some("y_pred".into());
        if self.mediated() {
            cols.covariates.push(CovariateColumn {
                name: COVARIATE_NAME.into(),
                kind: CovariateKind::Numeric,
            });
        }
        cols
    }

    fn full_axis(&self) -> GroupingAxis {
        GroupingAxis::from_attributes(&self.attributes).expect("validated attributes")
    }

    /// Key of a cell on an axis made of some of the spec's attributes.
    fn key_on(&self, axis: &GroupingAxis, cell: &CellSpec) -> SubgroupKey {
        let cats: Vec<&str> = axis
            .attributes
            .iter()
            .map(|a| {
                let pos = self.attributes.iter().position(|x| x == a).expect("axis attribute in spec");
                cell.categories[pos].as_str()
            })
            .collect();
        SubgroupKey::new(axis, &cats)
    }
}

fn score(rng: &mut ChaCha8Rng, predicted: bool, correct: bool, tau: f64, shrink: f64) -> f64 {
    let u: f64 = rng.random();
    let raw = match (predicted, correct) {
        (true, true) => 1.0 - (1.0 - tau) * u * u,
        (true, false) => tau + (1.0 - tau) * u,
        (false, true) => tau * u * u,
        (false, false) => tau * u,
    };
    let s = tau + (1.0 - shrink) * (raw - tau);
    if !predicted && s >= tau {
        tau * (1.0 - f64::EPSILON)
    } else {
        s
    }
}

/// Draws a cohort cell by cell from a single RNG stream seeded by `spec.seed`.
pub fn generate_cohort(spec: &SynthSpec) -> Result<AuditCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = spec.cells.iter().map(|c| c.size).sum();
    let mut records = Vec::with_capacity(total);
    for cell in &spec.cells {
        for _ in 0..cell.size {
            let y = rng.random_bool(cell.prevalence);
            let (p_error, covariates) = match &spec.mechanism {
                Mechanism::Direct => {
                    let p = if y { 1.0 - cell.tpr.unwrap() } else { cell.fpr.unwrap() };
                    (p, Vec::new())
                }
                Mechanism::CovariateMediated { fnr, fpr } => {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let z = cell.z_mean.unwrap() + noise;
                    let p = if y { fnr.at(z) } else { fpr.at(z) };
                    (p, vec![CovariateValue::Numeric(z)])
                }
            };
            let error = rng.random_bool(p_error.clamp(0.0, 1.0));
            let y_pred = y != error;
            let y_score = score(&mut rng, y_pred, !error, spec.threshold, spec.miscalibration);
            records.push(PredictionRecord {
                id: (records.len() + 1).to_string(),
                y_true: y,
                y_score: Some(y_score),
                y_pred: Some(y_pred),
                attributes: cell.categories.clone(),
                covariates,
            });
        }
    }
    AuditCohort::from_records(records, spec.columns(), "synth")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedRates {
    pub key: SubgroupKey,
    /// Expected record count.
    pub n: f64,
    pub ppr: f64,
    /// Undefined when the group is expected to have no positives.
    pub tpr: Option<f64>,
    /// Undefined when the group is expected to have no negatives.
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedAxis {
    pub axis: String,
    pub groups: Vec<ExpectedRates>,
    pub dp_gap: Option<f64>,
    pub eo_fpr_gap: Option<f64>,
    pub eod_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedSide {
    /// Expected standardized rate per full-intersection cell.
    pub rates: Vec<(SubgroupKey, f64)>,
    pub mean_pairwise: Option<f64>,
    pub max_pairwise: Option<f64>,
    pub sd: Option<f64>,
    pub u_avg: Option<f64>,
    pub u_max: Option<f64>,
    pub u_var: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOracle {
    pub epsilon: f64,
    pub cells: Vec<ExpectedRates>,
    /// Each attribute alone, then the full intersection when there are
    /// several attributes.
    pub axes: Vec<ExpectedAxis>,
    pub cfpr: ExpectedSide,
    pub cfnr: ExpectedSide,
}

/// E[f(Z)] for Z ~ N(mean, 1) by Gauss–Hermite quadrature.
fn normal_expectation(rule: &GaussHermite, mean: f64, f: impl Fn(f64) -> f64) -> f64 {
    rule.integrate(|x| f(mean + std::f64::consts::SQRT_2 * x)) / std::f64::consts::PI.sqrt()
}

struct CellRates {
    tpr: f64,
    fpr: f64,
}

fn range(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

fn expected_side(rates: Vec<(SubgroupKey, f64)>, epsilon: f64) -> ExpectedSide {
    let v: Vec<f64> = rates.iter().map(|r| r.1).collect();
    let k = v.len();
    let (mean_pairwise, max_pairwise, sd) = if k >= 2 {
        let mut diffs = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                diffs.push((v[i] - v[j]).abs());
            }
        }
        let mean = v.iter().sum::<f64>() / k as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k as f64;
        (
            Some(diffs.iter().sum::<f64>() / diffs.len() as f64),
            Some(diffs.iter().copied().fold(0.0, f64::max)),
            Some(var.sqrt()),
        )
    } else {
        (None, None, None)
    };
    let u = |a: Option<f64>| a.map(|a| (a - epsilon).max(0.0));
    ExpectedSide {
        rates,
        mean_pairwise,
        max_pairwise,
        sd,
        u_avg: u(mean_pairwise),
        u_max: u(max_pairwise),
        u_var: u(sd),
    }
}

/// Expected metrics computed from the spec alone.
pub fn oracle_metrics(spec: &SynthSpec) -> Result<SynthOracle> {
    spec.validate()?;
    let rule = GaussHermite::new(NonZeroUsize::new(QUADRATURE_NODES).unwrap());
    let per_cell: Vec<CellRates> = spec
        .cells
        .iter()
        .map(|cell| match &spec.mechanism {
            Mechanism::Direct => CellRates {
                tpr: cell.tpr.unwrap(),
                fpr: cell.fpr.unwrap(),
            },
            Mechanism::CovariateMediated { fnr, fpr } => {
                let m = cell.z_mean.unwrap();
                CellRates {
                    tpr: 1.0 - normal_expectation(&rule, m, |z| fnr.at(z)),
                    fpr: normal_expectation(&rule, m, |z| fpr.at(z)),
                }
            }
        })
        .collect();

    let mut axes: Vec<GroupingAxis> = spec.attributes.iter().map(|a| GroupingAxis::single(a)).collect();
    if spec.attributes.len() > 1 {
        axes.push(spec.full_axis());
    }

    let mut axis_out = Vec::new();
    for axis in &axes {
        // (n, n·prev, n·(1−prev), Σ positives·tpr, Σ negatives·fpr)
        let mut acc: BTreeMap<SubgroupKey, [f64; 5]> = BTreeMap::new();
        for (cell, r) in spec.cells.iter().zip(&per_cell) {
            let n = cell.size as f64;
            let pos = n * cell.prevalence;
            let neg = n - pos;
            let a = acc.entry(spec.key_on(axis, cell)).or_default();
            a[0] += n;
            a[1] += pos;
            a[2] += neg;
            a[3] += pos * r.tpr;
            a[4] += neg * r.fpr;
        }
        let groups: Vec<ExpectedRates> = acc
            .into_iter()
            .map(|(key, a)| {
                let tpr = (a[1] > 0.0).then(|| a[3] / a[1]);
                let fpr = (a[2] > 0.0).then(|| a[4] / a[2]);
                ExpectedRates {
                    key,
                    n: a[0],
                    ppr: (a[3] + a[4]) / a[0],
                    tpr,
                    fpr,
                }
            })
            .collect();
        let defined = |f: fn(&ExpectedRates) -> Option<f64>| -> Vec<f64> { groups.iter().filter_map(f).collect() };
        axis_out.push(ExpectedAxis {
            axis: axis.name.clone(),
            dp_gap: range(&defined(|g| Some(g.ppr))),
            eo_fpr_gap: range(&defined(|g| g.fpr)),
            eod_gap: range(&defined(|g| g.tpr)),
            groups,
        });
    }

    let full = spec.full_axis();
    let cells: Vec<ExpectedRates> = spec
        .cells
        .iter()
        .zip(&per_cell)
        .map(|(cell, r)| ExpectedRates {
            key: spec.key_on(&full, cell),
            n: cell.size as f64,
            ppr: cell.prevalence * r.tpr + (1.0 - cell.prevalence) * r.fpr,
            tpr: Some(r.tpr),
            fpr: Some(r.fpr),
        })
        .collect();

    // Standardized rates on the full intersection. Without covariates these
    // are the cell rates; with a shared link they are the link averaged over
    // the stratum's pooled covariate mixture, identical for every cell.
    let mut sorted: Vec<(usize, SubgroupKey)> =
        cells.iter().enumerate().map(|(i, c)| (i, c.key.clone())).collect();
    sorted.sort_by(|a, b| a.1.cmp(&b.1));
    let side = |positive: bool| -> Vec<(SubgroupKey, f64)> {
        let weight = |c: &CellSpec| {
            let n = c.size as f64;
            if positive {
                n * (1.0 - c.prevalence)
            } else {
                n * c.prevalence
            }
        };
        let in_stratum: Vec<&(usize, SubgroupKey)> =
            sorted.iter().filter(|(i, _)| weight(&spec.cells[*i]) > 0.0).collect();
        match &spec.mechanism {
            Mechanism::Direct => in_stratum
                .iter()
                .map(|(i, k)| (k.clone(), if positive { per_cell[*i].fpr } else { 1.0 - per_cell[*i].tpr }))
                .collect(),
            Mechanism::CovariateMediated { fnr, fpr } => {
                let link = if positive { fpr } else { fnr };
                let total: f64 = spec.cells.iter().map(weight).sum();
                let pooled: f64 = spec
                    .cells
                    .iter()
                    .map(|c| weight(c) * normal_expectation(&rule, c.z_mean.unwrap(), |z| link.at(z)))
                    .sum::<f64>()
                    / total;
                in_stratum.iter().map(|(_, k)| (k.clone(), pooled)).collect()
            }
        }
    };

    let cfpr = expected_side(side(true), spec.epsilon);
    let cfnr = expected_side(side(false), spec.epsilon);
    Ok(SynthOracle {
        epsilon: spec.epsilon,
        cells,
        axes: axis_out,
        cfpr,
        cfnr,
    })
}
