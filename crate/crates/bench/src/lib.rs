//! Shared fixtures for the engine benchmarks.

use fairaudit::cohort::{apply_masking, enumerate_subgroups, AxisIndex, GroupingAxis};
use fairaudit::synth::{CellSpec, Mechanism, SynthSpec};
use fairaudit::AuditCohort;

/// `cells` direct-mechanism cells over two attributes, `per_cell` records each.
pub fn direct_spec(cells: usize, per_cell: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        attributes: vec!["race".into(), "gender".into()],
        cells: (0..cells)
            .map(|i| CellSpec {
                categories: vec![format!("r{}", i / 2), format!("g{}", i % 2)],
                size: per_cell,
                prevalence: 0.3,
                tpr: Some(0.6 + 0.05 * (i % 4) as f64),
                fpr: Some(0.1 + 0.02 * (i % 3) as f64),
                z_mean: None,
            })
            .collect(),
        mechanism: Mechanism::Direct,
        threshold: 0.5,
        miscalibration: 0.0,
        epsilon: 0.1,
        seed,
    }
}

/// Index over the full intersection with no masking.
pub fn full_index(cohort: &AuditCohort) -> AxisIndex {
    let axis = GroupingAxis::from_attributes(&["race", "gender"]).unwrap();
    let counts = enumerate_subgroups(cohort, &axis).unwrap();
    let masking = apply_masking(&counts, &Default::default());
    AxisIndex::build(cohort, &axis, &masking.qualifying).unwrap()
}
