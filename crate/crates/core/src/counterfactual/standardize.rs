use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use super::seed::{replicate_rng, BOOTSTRAP_DOMAIN};
use super::{
    percentile_interval, AxisData, CounterfactualConfig, CounterfactualRates, ExcludedGroup, GroupRate, RateSource,
    Side,
};
use crate::cohort::{AuditCohort, AxisIndex, PredictionRecord};
use crate::error::{AuditError, Result};
use crate::learner::{build_design, fit_logistic, DesignSpec, LearnerConfig, LearnerModel};
use crate::stats::sigmoid;

/// Share of non-converged bootstrap refits above which a group's interval
/// carries a warning.
const NONCONVERGENCE_WARN_SHARE: f64 = 0.10;

struct Stratum {
    design: DMatrix<f64>,
    errors: Vec<bool>,
    /// Row indices (into `design`) of each qualifying group.
    group_rows: Vec<Vec<usize>>,
}

fn fit_rows(stratum: &Stratum, rows: &[usize], learner: &LearnerConfig) -> Result<LearnerModel> {
    let x = stratum.design.select_rows(rows.iter());
    let y: Vec<bool> = rows.iter().map(|&r| stratum.errors[r]).collect();
    fit_logistic(&x, &y, learner.options_for(rows.len()))
}

/// Mean predicted error over the population rows (a multiset of stratum rows).
fn standardize(model: &LearnerModel, stratum: &Stratum, population: &[usize]) -> f64 {
    if let Some(p) = model.constant_probability() {
        return p;
    }
    let eta = &stratum.design * &model.coefficients;
    let total: f64 = population.iter().map(|&r| sigmoid(eta[r])).sum();
    total / population.len() as f64
}

pub(crate) fn estimate(
    cohort: &AuditCohort,
    data: &AxisData,
    side: Side,
    learner: &LearnerConfig,
    cfg: &CounterfactualConfig,
) -> Result<(Option<CounterfactualRates>, Vec<String>)> {
    let mut warnings = Vec::new();
    let label = side.stratum_label();
    let members: Vec<usize> = (0..data.y.len()).filter(|&k| data.y[k] == label).collect();
    if members.is_empty() {
        warnings.push(format!("standardized {}: stratum is empty; side undefined", side.rate_name()));
        return Ok((None, warnings));
    }
    let records: Vec<&PredictionRecord> = members.iter().map(|&k| &cohort.records()[data.records[k]]).collect();
    let spec = DesignSpec::fit(&cohort.schema().covariates, records.iter().copied())?;
    let design = build_design(records.iter().copied(), &spec)?;
    if design.unseen_categories > 0 {
        warnings.push(format!(
            "standardized {}: {} covariate values outside the vocabulary were encoded as reference",
            side.rate_name(),
            design.unseen_categories
        ));
    }
    let mut group_rows = vec![Vec::new(); data.keys.len()];
    for (row, &k) in members.iter().enumerate() {
        group_rows[data.group[k] as usize].push(row);
    }
    let stratum = Stratum {
        design: design.matrix,
        errors: members.iter().map(|&k| side.is_error(data.y_pred[k])).collect(),
        group_rows,
    };

    let min_size = cfg.min_fit_size.max(1);
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for (g, rows) in stratum.group_rows.iter().enumerate() {
        if rows.len() >= min_size {
            included.push(g);
        } else {
            excluded.push(ExcludedGroup {
                key: data.keys[g].clone(),
                reason: format!("fewer than {min_size} records in the stratum"),
            });
        }
    }

    let population: Vec<usize> = (0..stratum.errors.len()).collect();
    let mut points = Vec::with_capacity(included.len());
    let mut failed_points = 0;
    for &g in &included {
        let model = fit_rows(&stratum, &stratum.group_rows[g], learner)?;
        if !model.diagnostics.converged {
            failed_points += 1;
            warnings.push(format!(
                "standardized {}: outcome model for `{}` did not converge (gradient norm {:.3e})",
                side.rate_name(),
                data.keys[g],
                model.diagnostics.gradient_norm
            ));
        }
        points.push(standardize(&model, &stratum, &population));
    }
    if !included.is_empty() && failed_points == included.len() {
        return Err(AuditError::Numeric(format!(
            "standardized {}: no outcome model converged",
            side.rate_name()
        )));
    }

    let side_tag = side.tag();
    let replicates: Vec<Vec<(f64, bool)>> = (0..cfg.bootstrap as u64)
        .into_par_iter()
        .map(|b| -> Result<Vec<(f64, bool)>> {
            let resampled: Vec<Vec<usize>> = stratum
                .group_rows
                .iter()
                .enumerate()
                .map(|(g, rows)| {
                    let mut rng = replicate_rng(cfg.seed, &[BOOTSTRAP_DOMAIN, side_tag, b, g as u64]);
                    (0..rows.len()).map(|_| rows[rng.random_range(0..rows.len())]).collect()
                })
                .collect();
            let pop: Vec<usize> = resampled.iter().flatten().copied().collect();
            included
                .iter()
                .map(|&g| {
                    let model = fit_rows(&stratum, &resampled[g], learner)?;
                    Ok((standardize(&model, &stratum, &pop), model.diagnostics.converged))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let alpha = 1.0 - cfg.ci_level;
    let estimates = included
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let mut values: Vec<f64> = replicates.iter().map(|r| r[i].0).collect();
            let failed = replicates.iter().filter(|r| !r[i].1).count();
            let (ci_lo, ci_hi) = percentile_interval(&mut values, alpha, points[i]);
            let share = failed as f64 / replicates.len() as f64;
            GroupRate {
                key: data.keys[g].clone(),
                estimate: points[i],
                ci_lo,
                ci_hi,
                replicates_used: replicates.len(),
                warning: (share > NONCONVERGENCE_WARN_SHARE)
                    .then(|| format!("{failed} of {} bootstrap refits did not converge", replicates.len())),
            }
        })
        .collect();
    Ok((
        Some(CounterfactualRates {
            side,
            method: RateSource::Standardized,
            ci_level: cfg.ci_level,
            estimates,
            excluded,
        }),
        warnings,
    ))
}

/// Standardized (g-formula) counterfactual error rates for one side.
///
/// For each qualifying group `a` an outcome model of the error indicator is
/// fit on the group's stratum records, then averaged over the covariates of
/// every stratum record of every qualifying group.
pub fn standardized_rates(
    cohort: &AuditCohort,
    index: &AxisIndex,
    side: Side,
    learner: &LearnerConfig,
    cfg: &CounterfactualConfig,
) -> Result<Option<CounterfactualRates>> {
    cfg.validate()?;
    learner.validate()?;
    let data = AxisData::new(cohort, index)?;
    Ok(estimate(cohort, &data, side, learner, cfg)?.0)
}
