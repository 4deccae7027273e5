//! `fairaudit`: audit, synth and render commands.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data validation
//! or I/O error, 3 numeric failure.

mod overrides;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fairaudit::audit::{write_outputs, AuditConfig};
use fairaudit::cohort::{write_cohort_csv, write_cohort_jsonl};
use fairaudit::counterfactual::SideUValues;
use fairaudit::report::{read_json, render_svg, AuditReport};
use fairaudit::synth::{generate_cohort, oracle_metrics, SynthSpec};
use fairaudit::AuditError;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "fairaudit", version, about = "Intersectional fairness audits of binary predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an audit described by a JSON config. Any config field can be
    /// overridden with `--<section>.<field> <value>`.
    Audit {
        #[arg(long, env = "FAIRAUDIT_CONFIG")]
        config: PathBuf,
        /// Master seed of the counterfactual layer.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Generate a synthetic cohort and its oracle from a spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        /// Cohort file to write.
        #[arg(long)]
        out: PathBuf,
        /// Oracle JSON path; `oracle.json` next to the cohort by default.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Render SVG figures from a report.
    Render {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<AuditError> for Failure {
    fn from(e: AuditError) -> Self {
        let code = match &e {
            AuditError::Config(_) => 1,
            AuditError::Numeric(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn read_json_file(path: &Path, code: u8) -> Result<Value, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Failure {
        code,
        message: format!("{}: invalid JSON: {e}", path.display()),
    })
}

fn load_config(
    path: &Path,
    overrides: &[(String, String)],
    seed: Option<u64>,
    out: Option<&Path>,
    parallelism: Option<usize>,
) -> Result<AuditConfig, Failure> {
    let mut value = read_json_file(path, 1)?;
    let mut set = |key: &str, raw: String| overrides::apply(&mut value, key, &raw).map_err(Failure::usage);
    for (key, raw) in overrides {
        set(key, raw.clone())?;
    }
    if let Some(s) = seed {
        set("counterfactual.seed", s.to_string())?;
    }
    if let Some(n) = parallelism {
        set("parallelism", n.to_string())?;
    }
    let mut config = AuditConfig::from_json(value).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if let Some(dir) = out {
        config.output.dir = dir.to_path_buf();
    }
    // Relative input paths are relative to the config file.
    let base = path.parent().unwrap_or(Path::new(""));
    if config.input.path.is_relative() {
        config.input.path = base.join(&config.input.path);
    }
    Ok(config)
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "NA".into())
}

fn print_summary(report: &AuditReport, written: &[PathBuf], extra_warnings: &[String]) {
    println!("audit `{}` ({} records, run {})", report.cohort.name, report.cohort.records, report.run_id);
    println!(
        "accuracy {:.3}  AUROC {}",
        report.performance.accuracy,
        fmt(report.performance.auroc)
    );
    println!("{:<32} {:>8} {:>8} {:>8}", "axis", "DP", "EO-FPR", "EOD");
    for panel in &report.observational {
        let g = &panel.gaps;
        println!(
            "{:<32} {:>8} {:>8} {:>8}",
            g.axis.name,
            fmt(g.dp_gap.value),
            fmt(g.eo_fpr_gap.value),
            fmt(g.eod_gap.value)
        );
    }
    if let Some(cf) = &report.counterfactual {
        println!("counterfactual ({:?}) on `{}`, ε = {}", cf.method, cf.axis, cf.epsilon);
        let line = |name: &str, s: &Option<SideUValues>| match s {
            Some(s) => println!("  {name}: u_avg {:.3}  u_max {:.3}  u_var {:.3}", s.u_avg, s.u_max, s.u_var),
            None => println!("  {name}: undefined"),
        };
        line("cFPR", &cf.u_values.positive);
        line("cFNR", &cf.u_values.negative);
    }
    let warnings: Vec<&String> = report.warnings.iter().chain(extra_warnings).collect();
    if !warnings.is_empty() {
        println!("{} warning(s):", warnings.len());
        for w in warnings.iter().take(20) {
            println!("  - {w}");
        }
        if warnings.len() > 20 {
            println!("  ... {} more in report.json", warnings.len() - 20);
        }
    }
    println!("wrote {} file(s)", written.len());
}

fn cmd_audit(
    config: &Path,
    overrides: &[(String, String)],
    seed: Option<u64>,
    out: Option<&Path>,
    parallelism: Option<usize>,
) -> Result<(), Failure> {
    let config = load_config(config, overrides, seed, out, parallelism)?;
    let report = fairaudit::run_audit(&config)?;
    let emitted = write_outputs(&report, &config.output)?;
    print_summary(&report, &emitted.files, &emitted.warnings);
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<(), AuditError>) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::data(format!("{}: {e}", parent.display())))?;
    }
    let file = fs::File::create(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn cmd_synth(
    spec_path: &Path,
    out: &Path,
    oracle: Option<&Path>,
    seed: Option<u64>,
    format: Format,
) -> Result<(), Failure> {
    let value = read_json_file(spec_path, 1)?;
    let mut spec: SynthSpec =
        serde_json::from_value(value).map_err(|e| Failure::usage(format!("{}: {e}", spec_path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let invalid = |e: AuditError| Failure::usage(e.to_string());
    let cohort = generate_cohort(&spec).map_err(invalid)?;
    let expected = oracle_metrics(&spec).map_err(invalid)?;
    write_file(out, |w| match format {
        Format::Csv => write_cohort_csv(&cohort, w),
        Format::Jsonl => write_cohort_jsonl(&cohort, w),
    })?;
    let oracle_path = oracle.map(Path::to_path_buf).unwrap_or_else(|| out.with_file_name("oracle.json"));
    let mut text = serde_json::to_string_pretty(&expected).map_err(|e| Failure::data(e.to_string()))?;
    text.push('\n');
    fs::write(&oracle_path, text).map_err(|e| Failure::data(format!("{}: {e}", oracle_path.display())))?;
    println!("wrote {} records to {} and oracle to {}", cohort.len(), out.display(), oracle_path.display());
    Ok(())
}

fn cmd_render(report: &Path, out: &Path) -> Result<(), Failure> {
    let report = read_json(report)?;
    let (files, warnings) = render_svg(&report, out)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match overrides::split_args(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if !overrides.is_empty() && !matches!(cli.command, Command::Audit { .. }) {
        eprintln!("error: dotted overrides apply to `audit` only");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Audit {
            config,
            seed,
            out,
            parallelism,
        } => cmd_audit(config, &overrides, *seed, out.as_deref(), *parallelism),
        Command::Synth {
            spec,
            out,
            oracle,
            seed,
            format,
        } => cmd_synth(spec, out, oracle.as_deref(), *seed, *format),
        Command::Render { report, out } => cmd_render(report, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
