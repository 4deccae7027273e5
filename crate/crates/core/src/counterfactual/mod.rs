//! Disparity attributable to group membership.
//!
//! Two estimators of per-subgroup counterfactual error rates are provided:
//!
//! * **permutation** — group labels are shuffled over the audited records
//!   (group sizes preserved exactly) and error rates recomputed per
//!   replicate. This is the randomized-membership reference scenario and
//!   also yields null distributions for every gap and aggregate.
//! * **standardized** — a per-group outcome model of the error indicator is
//!   averaged over the covariates of every record in the stratum
//!   (g-formula standardization, single nuisance model), with stratified
//!   bootstrap percentile intervals.
//!
//! The positive side is the false-positive rate in the `y = 0` stratum
//! (cFPR); the negative side is the false-negative rate in the `y = 1`
//! stratum (cFNR). u-values threshold the mean pairwise, max pairwise and
//! across-group standard deviation of subgroup rates by ε.

mod ecdf;
mod permutation;
pub mod seed;
mod standardize;
mod uvalues;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ecdf::{ecdf_differences, EcdfSeries};
pub use permutation::{
    permutation_group_rates, permutation_null, run_permutations, NullDistribution, PermutationRun,
};
pub use standardize::standardized_rates;
pub use uvalues::{u_values, SideUValues, UValueSet};

use crate::cohort::{AuditCohort, AxisIndex, SubgroupKey};
use crate::error::{AuditError, Result};
use crate::learner::LearnerConfig;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Permutation,
    Standardized,
    Both,
}

impl Method {
    fn permutation(self) -> bool {
        matches!(self, Method::Permutation | Method::Both)
    }

    fn standardized(self) -> bool {
        matches!(self, Method::Standardized | Method::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualConfig {
    /// `None` skips the counterfactual layer entirely.
    #[serde(default)]
    pub method: Option<Method>,
    /// Attributes of the audited axis; defaults to the full intersection.
    #[serde(default)]
    pub axis: Option<Vec<String>>,
    #[serde(default = "CounterfactualConfig::default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "CounterfactualConfig::default_permutations")]
    pub permutations: usize,
    #[serde(default = "CounterfactualConfig::default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "CounterfactualConfig::default_ci_level")]
    pub ci_level: f64,
    #[serde(default = "CounterfactualConfig::default_seed")]
    pub seed: u64,
    #[serde(default = "CounterfactualConfig::default_min_fit_size")]
    pub min_fit_size: usize,
}

impl CounterfactualConfig {
    fn default_epsilon() -> f64 {
        0.10
    }
    fn default_permutations() -> usize {
        1000
    }
    fn default_bootstrap() -> usize {
        200
    }
    fn default_ci_level() -> f64 {
        0.95
    }
    fn default_seed() -> u64 {
        20_240_601
    }
    fn default_min_fit_size() -> usize {
        10
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(AuditError::config("counterfactual.epsilon must lie in [0, 1]"));
        }
        if self.permutations < 1 {
            return Err(AuditError::config("counterfactual.permutations must be ≥ 1"));
        }
        if self.bootstrap < 1 {
            return Err(AuditError::config("counterfactual.bootstrap must be ≥ 1"));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(AuditError::config("counterfactual.ci_level must lie in (0, 1)"));
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        1.0 - self.ci_level
    }
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        CounterfactualConfig {
            method: None,
            axis: None,
            epsilon: Self::default_epsilon(),
            permutations: Self::default_permutations(),
            bootstrap: Self::default_bootstrap(),
            ci_level: Self::default_ci_level(),
            seed: Self::default_seed(),
            min_fit_size: Self::default_min_fit_size(),
        }
    }
}

/// Which error rate a counterfactual estimate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// cFPR: predicted positive among `y = 0`.
    Positive,
    /// cFNR: predicted negative among `y = 1`.
    Negative,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Positive, Side::Negative];

    /// Label value defining the stratum.
    pub fn stratum_label(self) -> bool {
        matches!(self, Side::Negative)
    }

    /// Error indicator for a prediction inside the stratum.
    pub fn is_error(self, y_pred: bool) -> bool {
        match self {
            Side::Positive => y_pred,
            Side::Negative => !y_pred,
        }
    }

    pub fn rate_name(self) -> &'static str {
        match self {
            Side::Positive => "cFPR",
            Side::Negative => "cFNR",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Side::Positive => 1,
            Side::Negative => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateSource {
    Permutation,
    Standardized,
    /// Raw per-group stratum rates (no counterfactual adjustment).
    Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub key: SubgroupKey,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Replicates that produced a value for this group.
    pub replicates_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedGroup {
    pub key: SubgroupKey,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRates {
    pub side: Side,
    pub method: RateSource,
    pub ci_level: f64,
    pub estimates: Vec<GroupRate>,
    pub excluded: Vec<ExcludedGroup>,
}

impl CounterfactualRates {
    pub fn values(&self) -> Vec<f64> {
        self.estimates.iter().map(|g| g.estimate).collect()
    }
}

/// Gap and aggregate statistics that get a permutation null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullMetric {
    DpGap,
    EoFprGap,
    EodGap,
    MeanPairwisePos,
    MeanPairwiseNeg,
    MaxPairwisePos,
    MaxPairwiseNeg,
    SdPos,
    SdNeg,
}

impl NullMetric {
    pub const ALL: [NullMetric; 9] = [
        NullMetric::DpGap,
        NullMetric::EoFprGap,
        NullMetric::EodGap,
        NullMetric::MeanPairwisePos,
        NullMetric::MeanPairwiseNeg,
        NullMetric::MaxPairwisePos,
        NullMetric::MaxPairwiseNeg,
        NullMetric::SdPos,
        NullMetric::SdNeg,
    ];

    /// The pre-threshold u-value aggregates.
    pub const AGGREGATES: [NullMetric; 6] = [
        NullMetric::MeanPairwisePos,
        NullMetric::MeanPairwiseNeg,
        NullMetric::MaxPairwisePos,
        NullMetric::MaxPairwiseNeg,
        NullMetric::SdPos,
        NullMetric::SdNeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NullMetric::DpGap => "dp_gap",
            NullMetric::EoFprGap => "eo_fpr_gap",
            NullMetric::EodGap => "eod_gap",
            NullMetric::MeanPairwisePos => "mean_pairwise_pos",
            NullMetric::MeanPairwiseNeg => "mean_pairwise_neg",
            NullMetric::MaxPairwisePos => "max_pairwise_pos",
            NullMetric::MaxPairwiseNeg => "max_pairwise_neg",
            NullMetric::SdPos => "sd_pos",
            NullMetric::SdNeg => "sd_neg",
        }
    }

    /// Value of the metric given per-group rates for each side.
    fn evaluate(self, rates: &GroupRates) -> Option<f64> {
        let agg = |side: &[f64]| stats::pairwise_aggregates(side);
        match self {
            NullMetric::DpGap => stats::range(rates.ppr.iter().flatten().copied()),
            NullMetric::EoFprGap => stats::range(rates.fpr.iter().flatten().copied()),
            NullMetric::EodGap => stats::range(rates.tpr.iter().flatten().copied()),
            NullMetric::MeanPairwisePos => agg(&rates.defined_fpr()).map(|a| a.0),
            NullMetric::MeanPairwiseNeg => agg(&rates.defined_fnr()).map(|a| a.0),
            NullMetric::MaxPairwisePos => agg(&rates.defined_fpr()).map(|a| a.1),
            NullMetric::MaxPairwiseNeg => agg(&rates.defined_fnr()).map(|a| a.1),
            NullMetric::SdPos => agg(&rates.defined_fpr()).map(|a| a.2),
            NullMetric::SdNeg => agg(&rates.defined_fnr()).map(|a| a.2),
        }
    }

    /// Aggregate metric value from a set of subgroup rates for its side.
    pub fn aggregate_of(self, side_rates: &[f64]) -> Option<f64> {
        let (mean, max, sd) = stats::pairwise_aggregates(side_rates)?;
        match self {
            NullMetric::MeanPairwisePos | NullMetric::MeanPairwiseNeg => Some(mean),
            NullMetric::MaxPairwisePos | NullMetric::MaxPairwiseNeg => Some(max),
            NullMetric::SdPos | NullMetric::SdNeg => Some(sd),
            _ => None,
        }
    }

    pub fn side(self) -> Option<Side> {
        match self {
            NullMetric::MeanPairwisePos | NullMetric::MaxPairwisePos | NullMetric::SdPos => Some(Side::Positive),
            NullMetric::MeanPairwiseNeg | NullMetric::MaxPairwiseNeg | NullMetric::SdNeg => Some(Side::Negative),
            _ => None,
        }
    }
}

/// Confusion counts of one group under one (possibly permuted) assignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub n: u32,
    pub pred_pos: u32,
    pub neg: u32,
    pub fp: u32,
    pub pos: u32,
    pub fn_: u32,
}

impl CellCounts {
    fn add(&mut self, y: bool, yhat: bool) {
        self.n += 1;
        self.pred_pos += yhat as u32;
        if y {
            self.pos += 1;
            self.fn_ += (!yhat) as u32;
        } else {
            self.neg += 1;
            self.fp += yhat as u32;
        }
    }

    pub fn side_rate(&self, side: Side) -> Option<f64> {
        match side {
            Side::Positive => (self.neg > 0).then(|| self.fp as f64 / self.neg as f64),
            Side::Negative => (self.pos > 0).then(|| self.fn_ as f64 / self.pos as f64),
        }
    }

    pub fn stratum_size(&self, side: Side) -> u32 {
        match side {
            Side::Positive => self.neg,
            Side::Negative => self.pos,
        }
    }
}

/// Rates for every group under one assignment; `None` where undefined.
struct GroupRates {
    ppr: Vec<Option<f64>>,
    fpr: Vec<Option<f64>>,
    tpr: Vec<Option<f64>>,
    fnr: Vec<Option<f64>>,
}

impl GroupRates {
    fn from_counts(cells: &[CellCounts]) -> Self {
        let ratio = |a: u32, b: u32| (b > 0).then(|| a as f64 / b as f64);
        GroupRates {
            ppr: cells.iter().map(|c| ratio(c.pred_pos, c.n)).collect(),
            fpr: cells.iter().map(|c| ratio(c.fp, c.neg)).collect(),
            // tp / (tp + fn), matching the observational computation exactly
            tpr: cells.iter().map(|c| ratio(c.pos - c.fn_, c.pos)).collect(),
            fnr: cells.iter().map(|c| ratio(c.fn_, c.pos)).collect(),
        }
    }

    fn defined_fpr(&self) -> Vec<f64> {
        self.fpr.iter().flatten().copied().collect()
    }

    fn defined_fnr(&self) -> Vec<f64> {
        self.fnr.iter().flatten().copied().collect()
    }
}

/// Qualifying records of one axis in compact form.
pub(crate) struct AxisData {
    pub keys: Vec<SubgroupKey>,
    /// Record index in the cohort.
    pub records: Vec<usize>,
    pub y: Vec<bool>,
    pub y_pred: Vec<bool>,
    pub group: Vec<u32>,
}

impl AxisData {
    pub fn new(cohort: &AuditCohort, index: &AxisIndex) -> Result<Self> {
        if !cohort.predictions_materialized() {
            return Err(AuditError::validation("hard predictions must be derived before the counterfactual layer"));
        }
        let mut data = AxisData {
            keys: index.keys.clone(),
            records: Vec::new(),
            y: Vec::new(),
            y_pred: Vec::new(),
            group: Vec::new(),
        };
        for (i, (rec, g)) in cohort.records().iter().zip(&index.assignment).enumerate() {
            if let Some(g) = g {
                data.records.push(i);
                data.y.push(rec.y_true);
                data.y_pred.push(rec.prediction());
                data.group.push(*g as u32);
            }
        }
        Ok(data)
    }

    pub fn counts(&self, group: &[u32]) -> Vec<CellCounts> {
        let mut cells = vec![CellCounts::default(); self.keys.len()];
        for ((&g, &y), &yhat) in group.iter().zip(&self.y).zip(&self.y_pred) {
            cells[g as usize].add(y, yhat);
        }
        cells
    }
}

/// Raw stratum error rates of each group, as a rate set with point-width
/// intervals.
pub fn observed_rates(cohort: &AuditCohort, index: &AxisIndex, side: Side) -> Result<Option<CounterfactualRates>> {
    let data = AxisData::new(cohort, index)?;
    Ok(observed_rates_from(&data, &data.counts(&data.group), side))
}

fn observed_rates_from(data: &AxisData, cells: &[CellCounts], side: Side) -> Option<CounterfactualRates> {
    if cells.iter().all(|c| c.stratum_size(side) == 0) {
        return None;
    }
    let mut estimates = Vec::new();
    let mut excluded = Vec::new();
    for (key, c) in data.keys.iter().zip(cells) {
        match c.side_rate(side) {
            Some(r) => estimates.push(GroupRate {
                key: key.clone(),
                estimate: r,
                ci_lo: r,
                ci_hi: r,
                replicates_used: 0,
                warning: None,
            }),
            None => excluded.push(ExcludedGroup {
                key: key.clone(),
                reason: "empty stratum".into(),
            }),
        }
    }
    Some(CounterfactualRates {
        side,
        method: RateSource::Observed,
        ci_level: 1.0,
        estimates,
        excluded,
    })
}

/// Percentile interval, widened if needed so that it contains `point`.
fn percentile_interval(values: &mut [f64], alpha: f64, point: f64) -> (f64, f64) {
    stats::sort_floats(values);
    let lo = stats::quantile_sorted(values, alpha / 2.0).unwrap_or(point);
    let hi = stats::quantile_sorted(values, 1.0 - alpha / 2.0).unwrap_or(point);
    (lo.min(point), hi.max(point))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideRates {
    pub positive: Option<CounterfactualRates>,
    pub negative: Option<CounterfactualRates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub axis: String,
    pub method: Method,
    pub observed: SideRates,
    pub permutation: Option<SideRates>,
    pub standardized: Option<SideRates>,
    pub u_values: UValueSet,
    /// Observed value of every null metric: gaps from the raw rates,
    /// aggregates from the u-value source rates.
    pub observed_metrics: BTreeMap<NullMetric, Option<f64>>,
    pub nulls: Vec<NullDistribution>,
    pub ecdf: Vec<EcdfSeries>,
    pub warnings: Vec<String>,
}

/// Runs the configured estimators on the qualifying groups of one axis.
pub fn run_counterfactual(
    cohort: &AuditCohort,
    index: &AxisIndex,
    cfg: &CounterfactualConfig,
    learner: &LearnerConfig,
) -> Result<CounterfactualResult> {
    cfg.validate()?;
    learner.validate()?;
    if index.keys.len() < 2 {
        return Err(AuditError::validation(format!(
            "counterfactual analysis of axis `{}` needs at least two qualifying subgroups",
            index.axis.name
        )));
    }
    let method = cfg.method.unwrap_or(Method::Both);
    let data = AxisData::new(cohort, index)?;
    let observed_cells = data.counts(&data.group);
    let mut warnings = Vec::new();

    let observed = SideRates {
        positive: observed_rates_from(&data, &observed_cells, Side::Positive),
        negative: observed_rates_from(&data, &observed_cells, Side::Negative),
    };

    let run = method
        .permutation()
        .then(|| permutation::run_on(&data, cfg.permutations, cfg.seed));
    let permutation = run.as_ref().map(|run| {
        let rates = |side| permutation::group_rates_from(run, side, cfg.alpha(), cfg.ci_level);
        SideRates {
            positive: rates(Side::Positive),
            negative: rates(Side::Negative),
        }
    });

    let standardized = if method.standardized() {
        let mut sides = Vec::new();
        for side in Side::BOTH {
            let (rates, mut w) = standardize::estimate(cohort, &data, side, learner, cfg)?;
            warnings.append(&mut w);
            sides.push(rates);
        }
        let negative = sides.pop().flatten();
        let positive = sides.pop().flatten();
        Some(SideRates { positive, negative })
    } else {
        None
    };

    let source = standardized.as_ref().unwrap_or(&observed);
    let u_values = u_values(source.positive.as_ref(), source.negative.as_ref(), cfg.epsilon);
    warnings.extend(u_values.notes.iter().cloned());

    let observed_group_rates = GroupRates::from_counts(&observed_cells);
    let mut observed_metrics = BTreeMap::new();
    for metric in NullMetric::ALL {
        let value = match metric.side() {
            None => metric.evaluate(&observed_group_rates),
            Some(side) => {
                let rates = match side {
                    Side::Positive => source.positive.as_ref(),
                    Side::Negative => source.negative.as_ref(),
                };
                rates.and_then(|r| metric.aggregate_of(&r.values()))
            }
        };
        observed_metrics.insert(metric, value);
    }

    let (nulls, ecdf) = match &run {
        Some(run) => {
            let nulls: Vec<NullDistribution> = NullMetric::ALL
                .iter()
                .map(|&m| permutation::null_from(run, m, observed_metrics[&m]))
                .collect();
            let observed_aggregates: BTreeMap<NullMetric, f64> = NullMetric::AGGREGATES
                .iter()
                .filter_map(|m| observed_metrics[m].map(|v| (*m, v)))
                .collect();
            let ecdf = ecdf_differences(&observed_aggregates, &nulls, cfg.epsilon)?;
            (nulls, ecdf)
        }
        None => (Vec::new(), Vec::new()),
    };

    for rates in [&permutation, &standardized].into_iter().flatten() {
        for side in [&rates.positive, &rates.negative].into_iter().flatten() {
            for ex in &side.excluded {
                warnings.push(format!(
                    "{:?} {}: subgroup `{}` excluded ({})",
                    side.method,
                    side.side.rate_name(),
                    ex.key,
                    ex.reason
                ));
            }
        }
    }

    Ok(CounterfactualResult {
        axis: index.axis.name.clone(),
        method,
        observed,
        permutation,
        standardized,
        u_values,
        observed_metrics,
        nulls,
        ecdf,
        warnings,
    })
}
