use serde::{Deserialize, Serialize};

use super::{CounterfactualRates, RateSource, Side};
use crate::stats;

/// Pre-threshold aggregates of one side and their u-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideUValues {
    pub groups: usize,
    pub mean_pairwise: f64,
    pub max_pairwise: f64,
    /// Population standard deviation of the subgroup rates.
    pub sd: f64,
    pub u_avg: f64,
    pub u_max: f64,
    pub u_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UValueSet {
    pub epsilon: f64,
    /// Estimator whose subgroup rates fed the aggregates.
    pub source: Option<RateSource>,
    pub positive: Option<SideUValues>,
    pub negative: Option<SideUValues>,
    pub notes: Vec<String>,
}

fn side_values(rates: &CounterfactualRates, epsilon: f64) -> Option<SideUValues> {
    let values = rates.values();
    let (mean_pairwise, max_pairwise, sd) = stats::pairwise_aggregates(&values)?;
    let excess = |v: f64| (v - epsilon).max(0.0);
    Some(SideUValues {
        groups: values.len(),
        mean_pairwise,
        max_pairwise,
        sd,
        u_avg: excess(mean_pairwise),
        u_max: excess(max_pairwise),
        u_var: excess(sd),
    })
}

/// u = max(0, aggregate − ε) for the mean pairwise, max pairwise and sd
/// aggregates of each side's subgroup rates.
pub fn u_values(
    positive: Option<&CounterfactualRates>,
    negative: Option<&CounterfactualRates>,
    epsilon: f64,
) -> UValueSet {
    let mut notes = Vec::new();
    let mut side = |rates: Option<&CounterfactualRates>, which: Side| {
        let out = rates.and_then(|r| side_values(r, epsilon));
        if out.is_none() {
            notes.push(format!(
                "u-values for {} undefined: fewer than two subgroup estimates",
                which.rate_name()
            ));
        }
        out
    };
    let pos = side(positive, Side::Positive);
    let neg = side(negative, Side::Negative);
    UValueSet {
        epsilon,
        source: positive.or(negative).map(|r| r.method),
        positive: pos,
        negative: neg,
        notes,
    }
}
