use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NullDistribution, NullMetric};
use crate::error::{AuditError, Result};
use crate::stats;

/// ECDF of observed-minus-replicate differences for one aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfSeries {
    pub metric: NullMetric,
    pub epsilon: f64,
    /// Distinct Δ values, ascending.
    pub deltas: Vec<f64>,
    /// Fraction of replicates with Δ ≤ the matching entry of `deltas`.
    pub cum_fraction: Vec<f64>,
    pub fraction_below_epsilon: f64,
    pub replicates: usize,
}

/// Δ_r = observed − replicate_r for each metric in `observed`, summarized as
/// an ECDF. Every observed metric must have a null distribution.
pub fn ecdf_differences(
    observed: &BTreeMap<NullMetric, f64>,
    nulls: &[NullDistribution],
    epsilon: f64,
) -> Result<Vec<EcdfSeries>> {
    observed
        .iter()
        .map(|(&metric, &obs)| {
            let null = nulls.iter().find(|n| n.metric == metric).ok_or_else(|| {
                AuditError::validation(format!("no null distribution for metric `{}`", metric.as_str()))
            })?;
            let mut deltas: Vec<f64> = null.defined().iter().map(|v| obs - v).collect();
            stats::sort_floats(&mut deltas);
            let m = deltas.len();
            let mut xs = Vec::new();
            let mut fractions = Vec::new();
            for (i, &d) in deltas.iter().enumerate() {
                if i + 1 < m && deltas[i + 1] == d {
                    continue;
                }
                xs.push(d);
                fractions.push((i + 1) as f64 / m as f64);
            }
            let below = deltas.iter().filter(|&&d| d < epsilon).count();
            Ok(EcdfSeries {
                metric,
                epsilon,
                deltas: xs,
                cum_fraction: fractions,
                fraction_below_epsilon: if m == 0 { 0.0 } else { below as f64 / m as f64 },
                replicates: m,
            })
        })
        .collect()
}
