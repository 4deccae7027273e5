mod common;

use std::collections::BTreeSet;

use common::{brute_groups, brute_range, pair_auroc, random_cohort, ATTRS};
use fairaudit::cohort::{apply_masking, enumerate_subgroups, AuditCohort, GroupingAxis, MaskingPolicy};
use fairaudit::counterfactual::{u_values, CounterfactualRates, GroupRate, RateSource, Side};
use fairaudit::learner::{fit_logistic, penalized_gradient, penalized_objective, FitOptions};
use fairaudit::observational::{auroc, confusion_stats, disparity_gap, youden_threshold, RateMetric};
use fairaudit::SubgroupKey;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shuffled(cohort: &AuditCohort, seed: u64) -> AuditCohort {
    let mut records = cohort.records().to_vec();
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    AuditCohort::from_records(records, cohort.schema().columns.clone(), "shuffled").unwrap()
}

fn all_axes(k: usize) -> Vec<GroupingAxis> {
    let mut axes: Vec<GroupingAxis> = ATTRS[..k].iter().map(|a| GroupingAxis::single(a)).collect();
    axes.push(GroupingAxis::from_attributes(&ATTRS[..k]).unwrap());
    axes
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subgroups_partition_and_masking_is_monotone(
        seed in any::<u64>(), n in 1usize..200, k in 1usize..=3, a in 1usize..40, b in 1usize..40,
    ) {
        let cohort = random_cohort(seed, n, k);
        let reordered = shuffled(&cohort, seed ^ 1);
        for axis in all_axes(k) {
            let counts = enumerate_subgroups(&cohort, &axis).unwrap();
            prop_assert_eq!(counts.values().sum::<usize>(), n);
            prop_assert_eq!(&counts, &enumerate_subgroups(&reordered, &axis).unwrap());
            let (lo, hi) = (a.min(b), a.max(b));
            let loose = apply_masking(&counts, &MaskingPolicy { n_min: lo });
            let strict = apply_masking(&counts, &MaskingPolicy { n_min: hi });
            let loose_masked: BTreeSet<_> = loose.masked.iter().collect();
            let strict_masked: BTreeSet<_> = strict.masked.iter().collect();
            prop_assert!(loose_masked.is_subset(&strict_masked));
            prop_assert_eq!(strict.masked.len() + strict.qualifying.len(), counts.len());
        }
    }

    #[test]
    fn rates_and_gaps_match_brute_force(seed in any::<u64>(), n in 1usize..200, k in 1usize..=3) {
        let cohort = random_cohort(seed, n, k);
        for axis in all_axes(k) {
            let keys: Vec<SubgroupKey> = enumerate_subgroups(&cohort, &axis).unwrap().into_keys().collect();
            let table = confusion_stats(&cohort, &axis, &keys).unwrap();
            let attrs: Vec<&str> = axis.attributes.iter().map(String::as_str).collect();
            let brute = brute_groups(&cohort, &attrs);
            prop_assert_eq!(table.groups.len(), brute.len());
            for (g, (cats, c)) in table.groups.iter().zip(&brute) {
                prop_assert_eq!(&g.key.categories, cats);
                prop_assert_eq!((g.tp, g.fp, g.tn, g.fn_), (c.tp, c.fp, c.tn, c.fn_));
                prop_assert_eq!(g.ppr, c.ppr());
                prop_assert_eq!(g.tpr, c.tpr());
                prop_assert_eq!(g.fpr, c.fpr());
            }
            let dp = disparity_gap(&table.groups, RateMetric::Ppr).value;
            prop_assert_eq!(dp, brute_range(brute.values().map(|c| Some(c.ppr()))));
            let eod = disparity_gap(&table.groups, RateMetric::Tpr).value;
            prop_assert_eq!(eod, brute_range(brute.values().map(|c| c.tpr())));
            // reversing group order leaves every gap unchanged
            let mut reversed = table.groups.clone();
            reversed.reverse();
            for m in [RateMetric::Ppr, RateMetric::Fpr, RateMetric::Tpr] {
                let g = disparity_gap(&table.groups, m).value;
                prop_assert_eq!(g, disparity_gap(&reversed, m).value);
                if let Some(v) = g {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn auroc_matches_pair_counting(seed in any::<u64>(), n in 1usize..200) {
        let cohort = random_cohort(seed, n, 1);
        let labels: Vec<bool> = cohort.records().iter().map(|r| r.y_true).collect();
        let scores: Vec<f64> = cohort.records().iter().map(|r| r.y_score.unwrap()).collect();
        let got = auroc(&labels, &scores).unwrap();
        match (got, pair_auroc(&labels, &scores)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn youden_threshold_is_optimal(seed in any::<u64>(), n in 2usize..150) {
        let cohort = random_cohort(seed, n, 1);
        let labels: Vec<bool> = cohort.records().iter().map(|r| r.y_true).collect();
        let scores: Vec<f64> = cohort.records().iter().map(|r| r.y_score.unwrap()).collect();
        let Some((t, j)) = youden_threshold(&labels, &scores) else {
            prop_assert!(labels.iter().all(|&y| y) || labels.iter().all(|&y| !y));
            return Ok(());
        };
        let n_pos = labels.iter().filter(|&&y| y).count() as f64;
        let n_neg = labels.len() as f64 - n_pos;
        let j_at = |t: f64| {
            let tp = labels.iter().zip(&scores).filter(|(&y, &s)| y && s >= t).count() as f64;
            let fp = labels.iter().zip(&scores).filter(|(&y, &s)| !y && s >= t).count() as f64;
            tp / n_pos - fp / n_neg
        };
        prop_assert!((j_at(t) - j).abs() < 1e-12);
        for &s in &scores {
            prop_assert!(j_at(s) <= j + 1e-12);
        }
    }

    #[test]
    fn learner_gradient_descent_and_row_order(seed in any::<u64>(), n in 8usize..60, p in 1usize..5, lambda in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x = DMatrix::from_fn(n, p + 1, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let y: Vec<bool> = (0..n).map(|i| i % 3 == 0 || rng.random_bool(0.3)).collect();
        let yf: Vec<f64> = y.iter().map(|&v| v as u8 as f64).collect();
        let beta = DVector::from_fn(p + 1, |_, _| rng.random_range(-1.5..1.5));

        let g = penalized_gradient(&x, &yf, &beta, lambda);
        for j in 0..=p {
            let h = 1e-5;
            let mut up = beta.clone();
            let mut down = beta.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (penalized_objective(&x, &yf, &up, lambda) - penalized_objective(&x, &yf, &down, lambda)) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "j={} fd={} g={}", j, fd, g[j]);
        }

        // objective never increases as more Newton steps are allowed
        let opts = |max_iter| FitOptions { lambda: lambda + 1e-3, tol: 1e-13, max_iter };
        let mut last = f64::INFINITY;
        for k in 0..8 {
            let m = fit_logistic(&x, &y, opts(k)).unwrap();
            if m.constant.is_some() {
                break;
            }
            let obj = penalized_objective(&x, &yf, &m.coefficients, lambda + 1e-3);
            prop_assert!(obj <= last + 1e-12);
            last = obj;
        }

        let full = fit_logistic(&x, &y, opts(100)).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let xs = x.select_rows(order.iter());
        let ys: Vec<bool> = order.iter().map(|&i| y[i]).collect();
        let shuffled = fit_logistic(&xs, &ys, opts(100)).unwrap();
        prop_assert!((&full.coefficients - &shuffled.coefficients).amax() <= 1e-10);
    }

    #[test]
    fn u_values_fall_as_epsilon_grows(rates in proptest::collection::vec(0.0f64..=1.0, 2..8), e1 in 0.0f64..=1.0, e2 in 0.0f64..=1.0) {
        let axis = GroupingAxis::single("g");
        let set = CounterfactualRates {
            side: Side::Negative,
            method: RateSource::Standardized,
            ci_level: 0.95,
            estimates: rates.iter().enumerate().map(|(i, &r)| GroupRate {
                key: SubgroupKey::new(&axis, &[i.to_string()]),
                estimate: r, ci_lo: r, ci_hi: r, replicates_used: 1, warning: None,
            }).collect(),
            excluded: vec![],
        };
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        let a = u_values(None, Some(&set), lo).negative.unwrap();
        let b = u_values(None, Some(&set), hi).negative.unwrap();
        prop_assert!(b.u_avg <= a.u_avg && b.u_max <= a.u_max && b.u_var <= a.u_var);
        prop_assert!(a.sd <= 0.5 && a.max_pairwise <= 1.0);
        let zero = u_values(None, Some(&set), 0.0).negative.unwrap();
        prop_assert_eq!(zero.u_avg, zero.mean_pairwise);
    }
}
