use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{heatmap_grid, AuditReport};
use crate::counterfactual::CounterfactualRates;
use crate::error::{AuditError, Result};

const FONT: &str = "font-family=\"sans-serif\" font-size=\"12\"";
const SERIES_COLOURS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(width: f64, height: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

fn text(s: &mut String, x: f64, y: f64, anchor: &str, body: &str) {
    let _ = writeln!(
        s,
        "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"{anchor}\" {FONT}>{}</text>",
        escape(body)
    );
}

/// White to dark red over gaps in [0, 0.5]; larger gaps saturate.
fn gap_colour(v: f64) -> String {
    let t = (v / 0.5).clamp(0.0, 1.0);
    let channel = |from: f64, to: f64| (from + (to - from) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", channel(255.0, 165.0), channel(245.0, 15.0), channel(240.0, 21.0))
}

pub(crate) fn heatmap_svg(report: &AuditReport) -> String {
    let grid = heatmap_grid(report);
    let (label_w, cell_w, cell_h, top) = (220.0, 110.0, 40.0, 60.0);
    let width = label_w + cell_w * grid.columns.len() as f64 + 20.0;
    let height = top + cell_h * grid.rows.len() as f64 + 20.0;
    let mut s = open(width, height);
    let auroc = grid.auroc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "NA".into());
    text(
        &mut s,
        10.0,
        20.0,
        "start",
        &format!("{}: accuracy {:.3}, AUROC {auroc}", grid.cohort, grid.accuracy),
    );
    for (j, col) in grid.columns.iter().enumerate() {
        text(&mut s, label_w + cell_w * (j as f64 + 0.5), top - 10.0, "middle", col);
    }
    for (i, (row, cells)) in grid.rows.iter().zip(&grid.cells).enumerate() {
        let y = top + cell_h * i as f64;
        text(&mut s, label_w - 10.0, y + cell_h / 2.0 + 4.0, "end", row);
        for (j, v) in cells.iter().enumerate() {
            let x = label_w + cell_w * j as f64;
            let fill = v.map(gap_colour).unwrap_or_else(|| "#cccccc".into());
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell_w}\" height=\"{cell_h}\" fill=\"{fill}\" stroke=\"#ffffff\"/>"
            );
            let label = v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "NA".into());
            text(&mut s, x + cell_w / 2.0, y + cell_h / 2.0 + 4.0, "middle", &label);
        }
    }
    s.push_str("</svg>\n");
    s
}

struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x_min: f64,
    x_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.left + (v - self.x_min) / (self.x_max - self.x_min) * self.width
    }

    fn y(&self, fraction: f64) -> f64 {
        self.top + (1.0 - fraction) * self.height
    }

    fn axes(&self, s: &mut String) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        let _ = writeln!(
            s,
            "<rect x=\"{l:.1}\" y=\"{t:.1}\" width=\"{w:.1}\" height=\"{h:.1}\" fill=\"none\" stroke=\"#333333\"/>"
        );
        for k in 0..=4 {
            let v = self.x_min + (self.x_max - self.x_min) * k as f64 / 4.0;
            text(s, self.x(v), t + h + 16.0, "middle", &format!("{v:.3}"));
        }
    }
}

pub(crate) fn ecdf_svg(report: &AuditReport) -> Option<String> {
    let cf = report.counterfactual.as_ref()?;
    if cf.ecdf.is_empty() {
        return None;
    }
    let eps = cf.epsilon;
    let all = cf.ecdf.iter().flat_map(|e| e.deltas.iter().copied());
    let (lo, hi) = all.fold((eps.min(0.0), eps.max(0.0)), |(a, b), d| (a.min(d), b.max(d)));
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let frame = Frame {
        left: 60.0,
        top: 40.0,
        width: 480.0,
        height: 300.0,
        x_min: lo - pad,
        x_max: hi + pad,
    };
    let mut s = open(800.0, 400.0);
    text(&mut s, 60.0, 24.0, "start", &format!("Observed minus counterfactual disparity ({})", cf.axis));
    frame.axes(&mut s);
    text(&mut s, 50.0, frame.y(0.0) + 4.0, "end", "0");
    text(&mut s, 50.0, frame.y(1.0) + 4.0, "end", "1");
    for (i, series) in cf.ecdf.iter().enumerate() {
        let colour = SERIES_COLOURS[i % SERIES_COLOURS.len()];
        let mut d = format!("M{:.2},{:.2}", frame.x(frame.x_min), frame.y(0.0));
        let mut prev = 0.0;
        for (x, f) in series.deltas.iter().zip(&series.cum_fraction) {
            let _ = write!(d, " H{:.2} V{:.2}", frame.x(*x), frame.y(*f));
            prev = *f;
        }
        let _ = write!(d, " H{:.2} V{:.2}", frame.x(frame.x_max), frame.y(prev));
        let _ = writeln!(s, "<path d=\"{d}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"/>");
        let ly = 60.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            "<line x1=\"560\" y1=\"{:.1}\" x2=\"580\" y2=\"{:.1}\" stroke=\"{colour}\" stroke-width=\"2\"/>",
            ly - 4.0,
            ly - 4.0
        );
        text(
            &mut s,
            586.0,
            ly,
            "start",
            &format!("{} ({:.3} below ε)", series.metric.as_str(), series.fraction_below_epsilon),
        );
    }
    let ex = frame.x(eps);
    let _ = writeln!(
        s,
        "<line class=\"epsilon\" x1=\"{ex:.2}\" y1=\"{:.2}\" x2=\"{ex:.2}\" y2=\"{:.2}\" stroke=\"#000000\" stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>",
        frame.top,
        frame.top + frame.height
    );
    text(&mut s, ex + 4.0, frame.top + 12.0, "start", &format!("ε = {eps}"));
    s.push_str("</svg>\n");
    Some(s)
}

pub(crate) fn ci_svg(rates: &CounterfactualRates) -> String {
    let rows = rates.estimates.len().max(1) as f64;
    let (left, top, width, row_h) = (220.0, 40.0, 400.0, 28.0);
    let hi = rates.estimates.iter().map(|g| g.ci_hi).fold(0.0_f64, f64::max);
    let frame = Frame {
        left,
        top,
        width,
        height: rows * row_h,
        x_min: 0.0,
        x_max: if hi > 0.0 { (hi * 1.1).min(1.0) } else { 1.0 },
    };
    let mut s = open(left + width + 180.0, top + rows * row_h + 40.0);
    text(
        &mut s,
        10.0,
        24.0,
        "start",
        &format!("{} with {:.0}% intervals ({:?})", rates.side.rate_name(), rates.ci_level * 100.0, rates.method),
    );
    frame.axes(&mut s);
    for (i, g) in rates.estimates.iter().enumerate() {
        let y = top + row_h * (i as f64 + 0.5);
        text(&mut s, left - 10.0, y + 4.0, "end", &g.key.label());
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#555555\" stroke-width=\"1.5\"/>",
            frame.x(g.ci_lo),
            frame.x(g.ci_hi)
        );
        for bound in [g.ci_lo, g.ci_hi] {
            let bx = frame.x(bound);
            let _ = writeln!(
                s,
                "<line x1=\"{bx:.2}\" y1=\"{:.2}\" x2=\"{bx:.2}\" y2=\"{:.2}\" stroke=\"#555555\"/>",
                y - 5.0,
                y + 5.0
            );
        }
        let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"#1f78b4\"/>", frame.x(g.estimate));
        text(
            &mut s,
            left + width + 10.0,
            y + 4.0,
            "start",
            &format!("{:.3} [{:.3}, {:.3}]", g.estimate, g.ci_lo, g.ci_hi),
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes every figure the report has data for. Returns the files written
/// and a warning per skipped figure.
pub fn render_svg(report: &AuditReport, dir: &Path) -> Result<(Vec<PathBuf>, Vec<String>)> {
    fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
    let mut files: Vec<(String, String)> = Vec::new();
    let mut warnings = Vec::new();
    if report.observational.is_empty() {
        warnings.push("no observational axes; heatmap skipped".to_string());
    } else {
        files.push(("heatmap.svg".into(), heatmap_svg(report)));
    }
    match ecdf_svg(report) {
        Some(svg) => files.push(("ecdf.svg".into(), svg)),
        None => warnings.push("report has no ECDF series; ECDF panel skipped".to_string()),
    }
    match &report.counterfactual {
        Some(cf) => {
            let sides = cf.primary_rates();
            for (name, rates) in [("ci_cfpr.svg", &sides.positive), ("ci_cfnr.svg", &sides.negative)] {
                match rates {
                    Some(r) => files.push((name.into(), ci_svg(r))),
                    None => warnings.push(format!("no rates for {name}; skipped")),
                }
            }
        }
        None => warnings.push("report has no counterfactual section; CI plots skipped".to_string()),
    }
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| AuditError::io(&path, e))?;
        written.push(path);
    }
    Ok((written, warnings))
}
