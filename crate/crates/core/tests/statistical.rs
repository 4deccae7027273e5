//! Coverage and calibration checks over many seeds.

use fairaudit::cohort::{apply_masking, enumerate_subgroups, AuditCohort, AxisIndex, GroupingAxis, MaskingPolicy};
use fairaudit::counterfactual::{permutation_null, standardized_rates, CounterfactualConfig, NullMetric, Side};
use fairaudit::learner::LearnerConfig;
use fairaudit::synth::{generate_cohort, oracle_metrics, CellSpec, LogisticLink, Mechanism, SynthSpec};

fn cell(categories: &[&str], size: usize, prevalence: f64, tpr: f64, fpr: f64) -> CellSpec {
    CellSpec {
        categories: categories.iter().map(|s| s.to_string()).collect(),
        size,
        prevalence,
        tpr: Some(tpr),
        fpr: Some(fpr),
        z_mean: None,
    }
}

fn spec(attributes: &[&str], cells: Vec<CellSpec>, mechanism: Mechanism, seed: u64) -> SynthSpec {
    SynthSpec {
        attributes: attributes.iter().map(|s| s.to_string()).collect(),
        cells,
        mechanism,
        threshold: 0.5,
        miscalibration: 0.0,
        epsilon: 0.1,
        seed,
    }
}

fn full_index(cohort: &AuditCohort) -> AxisIndex {
    let axis = GroupingAxis::from_attributes(&cohort.schema().columns.attributes).unwrap();
    let counts = enumerate_subgroups(cohort, &axis).unwrap();
    let masking = apply_masking(&counts, &MaskingPolicy { n_min: 1 });
    AxisIndex::build(cohort, &axis, &masking.qualifying).unwrap()
}

#[test]
fn bootstrap_intervals_cover_the_true_rate() {
    let truth = [("A", 0.85, 0.10), ("B", 0.70, 0.25)];
    let (mut hits, mut total) = (0, 0);
    for seed in 0..200 {
        let cells = truth.iter().map(|(c, tpr, fpr)| cell(&[c], 400, 0.4, *tpr, *fpr)).collect();
        let cohort = generate_cohort(&spec(&["race"], cells, Mechanism::Direct, 500 + seed)).unwrap();
        let index = full_index(&cohort);
        let cfg = CounterfactualConfig {
            bootstrap: 200,
            seed,
            ..Default::default()
        };
        for side in [Side::Positive, Side::Negative] {
            let rates = standardized_rates(&cohort, &index, side, &LearnerConfig::default(), &cfg)
                .unwrap()
                .unwrap();
            for (g, (_, tpr, fpr)) in rates.estimates.iter().zip(&truth) {
                let target = match side {
                    Side::Positive => *fpr,
                    Side::Negative => 1.0 - tpr,
                };
                total += 1;
                hits += (g.ci_lo <= target && target <= g.ci_hi) as usize;
            }
        }
    }
    let coverage = hits as f64 / total as f64;
    assert!(coverage >= 0.90, "coverage {coverage}");
}

#[test]
fn permutation_quantiles_are_uniform_under_exchangeability() {
    let mut quantiles = Vec::new();
    for seed in 0..200 {
        let cells = ["A", "B", "C"].iter().map(|c| cell(&[c], 300, 0.3, 0.75, 0.2)).collect();
        let cohort = generate_cohort(&spec(&["race"], cells, Mechanism::Direct, 9_000 + seed)).unwrap();
        let cfg = CounterfactualConfig {
            permutations: 500,
            seed,
            ..Default::default()
        };
        let nulls = permutation_null(&cohort, &full_index(&cohort), &[NullMetric::DpGap], &cfg).unwrap();
        quantiles.push(nulls[0].quantile.unwrap());
    }
    quantiles.sort_by(f64::total_cmp);
    let n = quantiles.len() as f64;
    let d = quantiles
        .iter()
        .enumerate()
        .map(|(i, &q)| (q - i as f64 / n).abs().max(((i + 1) as f64 / n - q).abs()))
        .fold(0.0, f64::max);
    // Kolmogorov critical value at α = 0.01.
    let critical = 1.628 / n.sqrt();
    assert!(d < critical, "KS statistic {d} ≥ {critical}");
}

/// Empirical rates of each cell within 4 binomial standard errors of the oracle.
fn check_rates(s: &SynthSpec) {
    let cohort = generate_cohort(s).unwrap();
    let oracle = oracle_metrics(s).unwrap();
    // Oracle keys list categories in sorted attribute-name order.
    let mut order: Vec<usize> = (0..s.attributes.len()).collect();
    order.sort_by_key(|&i| &s.attributes[i]);
    let key_of = |attrs: &[String]| -> Vec<String> { order.iter().map(|&i| attrs[i].clone()).collect() };
    for expected in &oracle.cells {
        let members: Vec<_> = cohort
            .records()
            .iter()
            .filter(|r| key_of(&r.attributes) == expected.key.categories)
            .collect();
        let n = members.len() as f64;
        assert_eq!(n, expected.n);
        let close = |hits: usize, total: usize, p: f64, what: &str| {
            let se = (p * (1.0 - p) / total as f64).sqrt().max(1e-9);
            let observed = hits as f64 / total as f64;
            assert!(
                (observed - p).abs() <= 4.0 * se,
                "{} {what}: {observed} vs {p} (se {se})",
                expected.key
            );
        };
        close(members.iter().filter(|r| r.prediction()).count(), members.len(), expected.ppr, "ppr");
        let pos: Vec<_> = members.iter().filter(|r| r.y_true).collect();
        let neg: Vec<_> = members.iter().filter(|r| !r.y_true).collect();
        close(pos.iter().filter(|r| r.prediction()).count(), pos.len(), expected.tpr.unwrap(), "tpr");
        close(neg.iter().filter(|r| r.prediction()).count(), neg.len(), expected.fpr.unwrap(), "fpr");
    }
}

#[test]
fn synthetic_rates_match_the_oracle() {
    let cells = vec![
        cell(&["A", "F"], 10_000, 0.3, 0.9, 0.05),
        cell(&["A", "M"], 12_000, 0.5, 0.6, 0.2),
        cell(&["B", "F"], 10_000, 0.2, 0.75, 0.1),
    ];
    check_rates(&spec(&["race", "gender"], cells, Mechanism::Direct, 3));

    let mediated = Mechanism::CovariateMediated {
        fnr: LogisticLink {
            intercept: -1.0,
            slope: 1.2,
        },
        fpr: LogisticLink {
            intercept: -2.0,
            slope: 0.8,
        },
    };
    let cells = [-0.8, 0.0, 1.1]
        .iter()
        .zip(["A", "B", "C"])
        .map(|(&m, c)| CellSpec {
            categories: vec![c.into()],
            size: 15_000,
            prevalence: 0.4,
            tpr: None,
            fpr: None,
            z_mean: Some(m),
        })
        .collect();
    check_rates(&spec(&["race"], cells, mediated, 4));
}
