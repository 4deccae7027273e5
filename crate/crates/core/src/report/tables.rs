use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AuditReport, CounterfactualSection};
use crate::counterfactual::{CounterfactualRates, SideUValues};
use crate::error::{AuditError, Result};

/// Column labels of the heatmap, in order: DP, EO-FPR, EOD.
pub const HEATMAP_METRICS: [&str; 3] = ["DP", "EO-FPR", "EOD"];

/// Axes × gap metrics; cells are exactly the panel's gap values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub cohort: String,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn heatmap_grid(report: &AuditReport) -> HeatmapGrid {
    HeatmapGrid {
        cohort: report.cohort.name.clone(),
        accuracy: report.performance.accuracy,
        auroc: report.performance.auroc,
        rows: report.observational.iter().map(|p| p.gaps.axis.name.clone()).collect(),
        columns: HEATMAP_METRICS.iter().map(|s| s.to_string()).collect(),
        cells: report
            .observational
            .iter()
            .map(|p| vec![p.gaps.dp_gap.value, p.gaps.eo_fpr_gap.value, p.gaps.eod_gap.value])
            .collect(),
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

struct Table {
    path: PathBuf,
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(dir: &Path, name: &str, header: &[&str]) -> Result<Self> {
        let mut t = Table {
            path: dir.join(name),
            writer: csv::Writer::from_writer(Vec::new()),
        };
        t.row(header)?;
        Ok(t)
    }

    fn row<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<()> {
        self.writer
            .write_record(fields)
            .map_err(|e| AuditError::validation(format!("{}: {e}", self.path.display())))
    }

    fn finish(self) -> Result<PathBuf> {
        let bytes = self
            .writer
            .into_inner()
            .map_err(|e| AuditError::validation(format!("{}: {e}", self.path.display())))?;
        fs::write(&self.path, bytes).map_err(|e| AuditError::io(&self.path, e))?;
        Ok(self.path)
    }
}

fn rate_rows(t: &mut Table, method: &str, rates: &CounterfactualRates) -> Result<()> {
    for g in &rates.estimates {
        t.row(&[
            method.to_string(),
            rates.side.rate_name().to_string(),
            g.key.label(),
            num(Some(g.estimate)),
            num(Some(g.ci_lo)),
            num(Some(g.ci_hi)),
        ])?;
    }
    Ok(())
}

fn counterfactual_tables(dir: &Path, cf: &CounterfactualSection, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut t = Table::new(dir, "ecdf.csv", &["metric", "delta", "cum_fraction"])?;
    for s in &cf.ecdf {
        for (d, f) in s.deltas.iter().zip(&s.cum_fraction) {
            t.row(&[s.metric.as_str().to_string(), num(Some(*d)), num(Some(*f))])?;
        }
    }
    out.push(t.finish()?);

    let mut t = Table::new(
        dir,
        "counterfactual_rates.csv",
        &["method", "rate", "subgroup", "estimate", "ci_lo", "ci_hi"],
    )?;
    let sets = [
        ("observed", Some(&cf.observed)),
        ("permutation", cf.permutation.as_ref()),
        ("standardized", cf.standardized.as_ref()),
    ];
    for (method, sides) in sets {
        for rates in sides.into_iter().flat_map(|s| [&s.positive, &s.negative]).flatten() {
            rate_rows(&mut t, method, rates)?;
        }
    }
    out.push(t.finish()?);

    let mut t = Table::new(
        dir,
        "u_values.csv",
        &["rate", "epsilon", "mean_pairwise", "max_pairwise", "sd", "u_avg", "u_max", "u_var"],
    )?;
    let u = &cf.u_values;
    for (name, side) in [("cFPR", &u.positive), ("cFNR", &u.negative)] {
        let v = |f: fn(&SideUValues) -> f64| num(side.as_ref().map(f));
        t.row(&[
            name.to_string(),
            num(Some(u.epsilon)),
            v(|s| s.mean_pairwise),
            v(|s| s.max_pairwise),
            v(|s| s.sd),
            v(|s| s.u_avg),
            v(|s| s.u_max),
            v(|s| s.u_var),
        ])?;
    }
    out.push(t.finish()?);

    if !cf.nulls.is_empty() {
        let mut t = Table::new(
            dir,
            "nulls.csv",
            &["metric", "observed", "null_mean", "null_lo", "null_hi", "quantile", "p_two_sided"],
        )?;
        for n in &cf.nulls {
            t.row(&[
                n.metric.as_str().to_string(),
                num(n.observed),
                num(n.mean),
                num(n.central_lo),
                num(n.central_hi),
                num(n.quantile),
                num(n.p_two_sided),
            ])?;
        }
        out.push(t.finish()?);
    }
    Ok(())
}

/// Writes the CSV tables and `panel.md` into `dir`; returns the paths written.
pub fn write_csv_tables(report: &AuditReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
    let mut out = Vec::new();

    let grid = heatmap_grid(report);
    let mut t = Table::new(dir, "heatmap.csv", &["cohort", "axis", "metric", "value"])?;
    for (axis, row) in grid.rows.iter().zip(&grid.cells) {
        for (metric, value) in grid.columns.iter().zip(row) {
            t.row(&[grid.cohort.clone(), axis.clone(), metric.clone(), num(*value)])?;
        }
    }
    out.push(t.finish()?);

    let mut t = Table::new(
        dir,
        "groups.csv",
        &["axis", "subgroup", "n", "tp", "fp", "tn", "fn", "ppr", "tpr", "fpr", "fnr", "accuracy"],
    )?;
    for panel in &report.observational {
        for g in &panel.table.groups {
            t.row(&[
                panel.gaps.axis.name.clone(),
                g.key.label(),
                g.n.to_string(),
                g.tp.to_string(),
                g.fp.to_string(),
                g.tn.to_string(),
                g.fn_.to_string(),
                num(Some(g.ppr)),
                num(g.tpr),
                num(g.fpr),
                num(g.fnr),
                num(Some(g.accuracy)),
            ])?;
        }
        let summary = report.cohort.axes.iter().find(|a| a.axis == panel.gaps.axis);
        for masked in summary.into_iter().flat_map(|a| &a.subgroups).filter(|s| s.masked) {
            let mut row = vec![panel.gaps.axis.name.clone(), masked.label.clone()];
            row.extend(std::iter::repeat("masked".to_string()).take(10));
            t.row(&row)?;
        }
    }
    out.push(t.finish()?);

    if let Some(cf) = &report.counterfactual {
        counterfactual_tables(dir, cf, &mut out)?;
    }

    let panel_path = dir.join("panel.md");
    fs::write(&panel_path, panel_markdown(report)).map_err(|e| AuditError::io(&panel_path, e))?;
    out.push(panel_path);
    Ok(out)
}

fn column_title(report: &AuditReport, index: usize) -> String {
    let axis = &report.observational[index].gaps.axis;
    if axis.is_intersectional() {
        format!("Intersectional Metric ({})", axis.name)
    } else {
        format!("Fairness Metric ({} only)", axis.name)
    }
}

/// Gap table with one column per audited axis and a performance footer.
pub fn panel_markdown(report: &AuditReport) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "NA".into());
    let mut s = String::new();
    let titles: Vec<String> = (0..report.observational.len()).map(|i| column_title(report, i)).collect();
    let _ = writeln!(s, "| Metric | {} |", titles.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(titles.len()));
    let rows: [(&str, fn(&crate::observational::FairnessGapSet) -> Option<f64>); 3] = [
        ("Demographic parity gap", |g| g.dp_gap.value),
        ("Equalized odds FPR gap", |g| g.eo_fpr_gap.value),
        ("Equal opportunity gap", |g| g.eod_gap.value),
    ];
    for (name, get) in rows {
        let values: Vec<String> = report.observational.iter().map(|p| cell(get(&p.gaps))).collect();
        let _ = writeln!(s, "| {name} | {} |", values.join(" | "));
    }
    let _ = writeln!(
        s,
        "\n*Model Accuracy: {:.3}; **Model AUROC: {}",
        report.performance.accuracy,
        cell(report.performance.auroc)
    );
    s
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::table_report;
    use super::*;

    #[test]
    fn heatmap_has_axes_times_metrics_rows() {
        let r = table_report();
        let dir = tempfile::tempdir().unwrap();
        write_csv_tables(&r, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("heatmap.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 3);
        assert!(text.contains("stroke,race,DP,0.131000"));
    }

    #[test]
    fn grid_cells_are_the_gap_values() {
        let r = table_report();
        let g = heatmap_grid(&r);
        for (row, panel) in g.cells.iter().zip(&r.observational) {
            assert_eq!(row[2], panel.gaps.eod_gap.value);
        }
    }

    #[test]
    fn footer_format() {
        let md = panel_markdown(&table_report());
        assert!(md.ends_with("*Model Accuracy: 0.817; **Model AUROC: 0.759\n"));
    }
}
