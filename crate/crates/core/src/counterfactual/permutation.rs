use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::seed::{replicate_rng, PERMUTATION_DOMAIN};
use super::{
    percentile_interval, AxisData, CellCounts, CounterfactualConfig, CounterfactualRates, ExcludedGroup, GroupRate,
    GroupRates, NullMetric, RateSource, Side,
};
use crate::cohort::{AuditCohort, AxisIndex, SubgroupKey};
use crate::error::{AuditError, Result};
use crate::stats;

/// Per-group counts under every permuted assignment.
#[derive(Debug, Clone)]
pub struct PermutationRun {
    pub keys: Vec<SubgroupKey>,
    pub observed: Vec<CellCounts>,
    /// `replicates[r][g]`: counts of group `g` in replicate `r`.
    pub replicates: Vec<Vec<CellCounts>>,
}

pub(crate) fn run_on(data: &AxisData, replicates: usize, seed: u64) -> PermutationRun {
    let replicates = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, &[PERMUTATION_DOMAIN, r]);
            let mut labels = data.group.clone();
            labels.shuffle(&mut rng);
            data.counts(&labels)
        })
        .collect();
    PermutationRun {
        keys: data.keys.clone(),
        observed: data.counts(&data.group),
        replicates,
    }
}

/// Shuffles group labels over the qualifying records `replicates` times.
pub fn run_permutations(cohort: &AuditCohort, index: &AxisIndex, cfg: &CounterfactualConfig) -> Result<PermutationRun> {
    cfg.validate()?;
    if index.keys.len() < 2 {
        return Err(AuditError::validation("permutation analysis needs at least two qualifying subgroups"));
    }
    let data = AxisData::new(cohort, index)?;
    Ok(run_on(&data, cfg.permutations, cfg.seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullDistribution {
    pub metric: NullMetric,
    pub observed: Option<f64>,
    /// One entry per replicate; `None` where the metric was undefined.
    pub values: Vec<Option<f64>>,
    /// Mid-rank position of the observed value among the defined replicates.
    pub quantile: Option<f64>,
    /// Two-sided permutation p-value, (1 + extreme count) / (1 + defined).
    pub p_two_sided: Option<f64>,
}

impl NullDistribution {
    pub fn defined(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn sorted_defined(&self) -> Vec<f64> {
        let mut v = self.defined();
        stats::sort_floats(&mut v);
        v
    }

    /// Central interval of the defined replicate values at `level`.
    pub fn central_interval(&self, level: f64) -> Option<(f64, f64)> {
        let sorted = self.sorted_defined();
        let a = (1.0 - level) / 2.0;
        Some((stats::quantile_sorted(&sorted, a)?, stats::quantile_sorted(&sorted, 1.0 - a)?))
    }
}

pub(crate) fn null_from(run: &PermutationRun, metric: NullMetric, observed: Option<f64>) -> NullDistribution {
    let values: Vec<Option<f64>> = run
        .replicates
        .iter()
        .map(|cells| metric.evaluate(&GroupRates::from_counts(cells)))
        .collect();
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let (quantile, p_two_sided) = match observed {
        Some(obs) if !defined.is_empty() => {
            let below = defined.iter().filter(|&&v| v < obs).count() as f64;
            let equal = defined.iter().filter(|&&v| v == obs).count() as f64;
            let above = defined.len() as f64 - below - equal;
            let m = defined.len() as f64;
            let tail = (below + equal).min(above + equal);
            (
                Some((below + 0.5 * equal) / m),
                Some((2.0 * (tail + 1.0) / (m + 1.0)).min(1.0)),
            )
        }
        _ => (None, None),
    };
    NullDistribution {
        metric,
        observed,
        values,
        quantile,
        p_two_sided,
    }
}

/// Null distributions of `metrics` under randomized group membership.
pub fn permutation_null(
    cohort: &AuditCohort,
    index: &AxisIndex,
    metrics: &[NullMetric],
    cfg: &CounterfactualConfig,
) -> Result<Vec<NullDistribution>> {
    let run = run_permutations(cohort, index, cfg)?;
    let observed = GroupRates::from_counts(&run.observed);
    Ok(metrics
        .iter()
        .map(|&m| null_from(&run, m, m.evaluate(&observed)))
        .collect())
}

pub(crate) fn group_rates_from(run: &PermutationRun, side: Side, alpha: f64, ci_level: f64) -> Option<CounterfactualRates> {
    if run.observed.iter().all(|c| c.stratum_size(side) == 0) {
        return None;
    }
    let mut estimates = Vec::new();
    let mut excluded = Vec::new();
    for (g, key) in run.keys.iter().enumerate() {
        let mut values: Vec<f64> = run.replicates.iter().filter_map(|cells| cells[g].side_rate(side)).collect();
        let empty = run.replicates.len() - values.len();
        if values.is_empty() {
            excluded.push(ExcludedGroup {
                key: key.clone(),
                reason: "stratum empty in every permutation replicate".into(),
            });
            continue;
        }
        let point = stats::mean(&values).unwrap_or_default();
        let (ci_lo, ci_hi) = percentile_interval(&mut values, alpha, point);
        estimates.push(GroupRate {
            key: key.clone(),
            estimate: point,
            ci_lo,
            ci_hi,
            replicates_used: values.len(),
            warning: (empty > 0).then(|| format!("{empty} replicates left this cell's stratum empty")),
        });
    }
    Some(CounterfactualRates {
        side,
        method: RateSource::Permutation,
        ci_level,
        estimates,
        excluded,
    })
}

/// Per-group error rates averaged over permuted assignments, with
/// percentile intervals. `None` when the stratum is empty overall.
pub fn permutation_group_rates(
    cohort: &AuditCohort,
    index: &AxisIndex,
    side: Side,
    cfg: &CounterfactualConfig,
) -> Result<Option<CounterfactualRates>> {
    let run = run_permutations(cohort, index, cfg)?;
    Ok(group_rates_from(&run, side, cfg.alpha(), cfg.ci_level))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{ColumnSpec, GroupingAxis, PredictionRecord};

    fn cohort(rows: &[(bool, bool, &str)]) -> (AuditCohort, AxisIndex) {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, &(y, yhat, g))| PredictionRecord {
                id: i.to_string(),
                y_true: y,
                y_score: None,
                y_pred: Some(yhat),
                attributes: vec![g.to_string()],
                covariates: vec![],
            })
            .collect();
        let mut cols = ColumnSpec::new(&["g"]);
        cols.y_score = None;
        cols.y_pred = Some("y_pred".into());
        let c = AuditCohort::from_records(records, cols, "test").unwrap();
        let axis = GroupingAxis::single("g");
        let keys: Vec<_> = crate::cohort::enumerate_subgroups(&c, &axis).unwrap().into_keys().collect();
        let idx = AxisIndex::build(&c, &axis, &keys).unwrap();
        (c, idx)
    }

    #[test]
    fn single_replicate() {
        let (c, idx) = cohort(&[(true, true, "a"), (false, true, "a"), (true, false, "b"), (false, false, "b")]);
        let cfg = CounterfactualConfig {
            permutations: 1,
            ..Default::default()
        };
        let nulls = permutation_null(&c, &idx, &[NullMetric::DpGap], &cfg).unwrap();
        assert_eq!(nulls[0].values.len(), 1);
        assert_eq!(nulls[0].observed, Some(1.0));
    }

    #[test]
    fn group_sizes_are_preserved() {
        let rows: Vec<_> = (0..30)
            .map(|i| (i % 2 == 0, i % 3 == 0, if i < 10 { "a" } else { "b" }))
            .collect();
        let (c, idx) = cohort(&rows);
        let cfg = CounterfactualConfig {
            permutations: 50,
            ..Default::default()
        };
        let run = run_permutations(&c, &idx, &cfg).unwrap();
        for cells in &run.replicates {
            assert_eq!(cells[0].n, 10);
            assert_eq!(cells[1].n, 20);
            let total_fp: u32 = cells.iter().map(|c| c.fp).sum();
            assert_eq!(total_fp, run.observed.iter().map(|c| c.fp).sum::<u32>());
        }
    }

    #[test]
    fn constant_errors_give_constant_rates() {
        // every y = 1 record is missed: FNR = 1 in any assignment
        let rows: Vec<_> = (0..40).map(|i| (true, false, if i % 4 == 0 { "a" } else { "b" })).collect();
        let (c, idx) = cohort(&rows);
        let cfg = CounterfactualConfig {
            permutations: 20,
            ..Default::default()
        };
        let neg = permutation_group_rates(&c, &idx, Side::Negative, &cfg).unwrap().unwrap();
        for g in &neg.estimates {
            assert_eq!((g.estimate, g.ci_lo, g.ci_hi), (1.0, 1.0, 1.0));
        }
        assert!(permutation_group_rates(&c, &idx, Side::Positive, &cfg).unwrap().is_none());
    }

    #[test]
    fn zero_pooled_fpr() {
        let rows: Vec<_> = (0..40)
            .map(|i| (i % 2 == 0, i % 2 == 0, if i < 20 { "a" } else { "b" }))
            .collect();
        let (c, idx) = cohort(&rows);
        let cfg = CounterfactualConfig {
            permutations: 20,
            ..Default::default()
        };
        let pos = permutation_group_rates(&c, &idx, Side::Positive, &cfg).unwrap().unwrap();
        assert!(pos.estimates.iter().all(|g| g.estimate == 0.0));
    }

    #[test]
    fn needs_two_groups() {
        let (c, idx) = cohort(&[(true, true, "a"), (false, false, "a")]);
        assert!(run_permutations(&c, &idx, &CounterfactualConfig::default()).is_err());
        let bad = CounterfactualConfig {
            permutations: 0,
            ..Default::default()
        };
        let (c, idx) = cohort(&[(true, true, "a"), (false, false, "b")]);
        assert!(run_permutations(&c, &idx, &bad).is_err());
    }
}
