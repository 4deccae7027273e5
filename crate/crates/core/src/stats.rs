//! Small numeric helpers shared by the metric and resampling code.

use std::cmp::Ordering;

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Population (divide-by-k) standard deviation.
pub fn population_sd(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}

/// Linear-interpolation quantile (Hyndman–Fan type 7) of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let p = p.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn sort_floats(values: &mut [f64]) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
}

/// Mean, maximum and population sd of the pairwise absolute differences of
/// `rates`; `None` with fewer than two rates.
pub fn pairwise_aggregates(rates: &[f64]) -> Option<(f64, f64, f64)> {
    if rates.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut pairs = 0usize;
    for (i, a) in rates.iter().enumerate() {
        for b in &rates[i + 1..] {
            let d = (a - b).abs();
            sum += d;
            max = max.max(d);
            pairs += 1;
        }
    }
    let sd = population_sd(rates)?;
    Some((sum / pairs as f64, max, sd))
}

/// Max − min over the defined values; `None` with fewer than two.
pub fn range(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut count = 0usize;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        count += 1;
    }
    (count >= 2).then(|| hi - lo)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}
