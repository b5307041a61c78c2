use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use microtune_core::engine::{StopSignal, DEFAULT_NEAR_OPTIMAL};
use microtune_core::report::{compare_runs, export_series, ComparisonReport, ExportFormat, RunReport};
use microtune_core::runspec::RunSpec;
use microtune_core::space::{format_byte_size, parse_space, Configuration, ParameterKind, SearchSpace, Value};
use microtune_core::store::{load_log, new_run_id, run_logged, RunLog};
use microtune_server::{serve_blocking, ServerConfig};

/// Grid and random search over JVM and container configurations, scored by
/// traced latency.
#[derive(Debug, Parser)]
#[command(name = "microtune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a search-space file.
    ValidateSpace { space: PathBuf },
    /// Print the number of configurations in a search space.
    Cardinality {
        space: PathBuf,
        /// Pin a parameter to its default (repeatable).
        #[arg(long = "disable", value_name = "PARAM")]
        disabled: Vec<String>,
    },
    /// Execute a run file and write its trial log.
    Run {
        spec: PathBuf,
        /// Log path; defaults to `runs/<run id>.jsonl`.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        /// Suppress per-trial progress on stderr.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Summarize a trial log.
    Report {
        log: PathBuf,
        #[arg(long, short, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        /// Write to a file instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Compare two runs over the same space (typically grid vs random).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Relative distance from the global best that counts as reached.
        #[arg(long, default_value_t = DEFAULT_NEAR_OPTIMAL)]
        tolerance: f64,
        #[arg(long, value_enum, default_value_t = CompareFormat::Text)]
        format: CompareFormat,
    },
    /// Start the HTTP API.
    Serve {
        /// Overrides MICROTUNE_DATA_DIR.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Overrides MICROTUNE_LISTEN.
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
    Csv,
    Svg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CompareFormat {
    Text,
    Json,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::ValidateSpace { space } => {
            let space = read_space(&space)?;
            println!(
                "{}: {} parameters, cardinality {}",
                space.name(),
                space.parameters().len(),
                space.cardinality()
            );
        }
        Command::Cardinality { space, disabled } => {
            let mut space = read_space(&space)?;
            for name in &disabled {
                space = space.with_enabled(name, false)?;
            }
            println!("{}", space.cardinality());
        }
        Command::Run {
            spec,
            out,
            run_id,
            quiet,
        } => run(&spec, out, run_id, quiet)?,
        Command::Report { log, format, output } => {
            let log = load_log(&log)?;
            let report = log.report()?;
            let text = match format {
                ReportFormat::Text => render_report(&log, &report)?,
                ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
                ReportFormat::Csv => export_series(&report, ExportFormat::Csv),
                ReportFormat::Svg => export_series(&report, ExportFormat::Svg),
            };
            match output {
                Some(path) => std::fs::write(&path, text).with_context(|| path.display().to_string())?,
                None => print!("{text}"),
            }
        }
        Command::Compare {
            a,
            b,
            tolerance,
            format,
        } => {
            if tolerance.is_nan() || tolerance < 0.0 {
                bail!("tolerance must be non-negative");
            }
            let comparison = compare_runs(&load_log(&a)?, &load_log(&b)?, tolerance)?;
            match format {
                CompareFormat::Text => print!("{}", render_comparison(&comparison)),
                CompareFormat::Json => println!("{}", serde_json::to_string_pretty(&comparison)?),
            }
        }
        Command::Serve { data_dir, listen } => {
            let mut config = ServerConfig::from_env().map_err(anyhow::Error::msg)?;
            if let Some(dir) = data_dir {
                config.data_dir = dir;
            }
            if let Some(addr) = listen {
                config.listen = addr;
            }
            eprintln!("serving {} on http://{}", config.data_dir.display(), config.listen);
            serve_blocking(config)?;
        }
    }
    Ok(())
}

fn read_space(path: &Path) -> Result<SearchSpace> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    parse_space(&text).with_context(|| path.display().to_string())
}

fn run(spec_path: &Path, out: Option<PathBuf>, run_id: Option<String>, quiet: bool) -> Result<()> {
    let spec = RunSpec::load(spec_path).with_context(|| spec_path.display().to_string())?;
    let run_id = run_id.unwrap_or_else(new_run_id);
    let out = out.unwrap_or_else(|| Path::new("runs").join(format!("{run_id}.jsonl")));
    let budget = spec.budget;
    let state = run_logged(&spec, &run_id, &out, &StopSignal::new(), &mut |trial| {
        if quiet {
            return;
        }
        let label = if trial.baseline {
            "baseline".to_string()
        } else {
            format!("{}/{budget}", trial.trial_id)
        };
        match trial.mean() {
            Some(mean) => eprintln!("[{label}] #{} {mean:.6} s", trial.config_index),
            None => eprintln!(
                "[{label}] #{} incomplete ({})",
                trial.config_index,
                trial.status.reason().unwrap_or("unknown")
            ),
        }
    })?;
    println!("run {run_id}: {}", format!("{:?}", state.status).to_lowercase());
    println!("log {}", out.display());
    if let Some(cause) = &state.cause {
        println!("cause {cause}");
    }
    let log = load_log(&out)?;
    match log.report() {
        Ok(report) => print!("{}", render_report(&log, &report)?),
        Err(e) => println!("no report: {e}"),
    }
    Ok(())
}

/// Renders byte-sized values with their unit suffix.
fn describe(space: &SearchSpace, config: &Configuration) -> String {
    let parts: Vec<String> = config
        .iter()
        .map(|(name, value)| {
            let byte_kind = space.parameter(name).is_some_and(|p| p.kind() == ParameterKind::Byte);
            let shown = match value {
                Value::Int(n) if byte_kind && *n > 0 => {
                    format_byte_size(*n as u64).unwrap_or_else(|_| n.to_string())
                }
                Value::Text(s) => s.clone(),
                other => other.to_string(),
            };
            format!("{name}={shown}")
        })
        .collect();
    parts.join(" ")
}

fn render_report(log: &RunLog, report: &RunReport) -> Result<String> {
    let space = log.header.space()?;
    let mut s = String::new();
    let status = log
        .footer
        .as_ref()
        .map_or("unfinished".to_string(), |f| format!("{:?}", f.status).to_lowercase());
    writeln!(s, "run          {} ({}, {status})", report.run_id, report.strategy.label())?;
    writeln!(s, "space        {} (cardinality {})", space.name(), space.cardinality())?;
    writeln!(
        s,
        "baseline     mean {:.6} s  trial {}  {}",
        report.baseline.mean_s,
        report.baseline.trial_id,
        describe(&space, &report.baseline.configuration)
    )?;
    match &report.best {
        Some(best) => {
            writeln!(
                s,
                "best         mean {:.6} s  trial {}  {}",
                best.mean_s,
                best.trial_id,
                describe(&space, &best.configuration)
            )?;
            writeln!(
                s,
                "improvement  {:.2}%",
                report.improvement_percent.expect("present with best")
            )?;
        }
        None => writeln!(s, "best         none (no complete trials)")?,
    }
    writeln!(
        s,
        "trials       {} complete, {} incomplete, {:.3} s measured",
        report.counts.complete, report.counts.incomplete, report.total_elapsed_s
    )?;
    Ok(s)
}

fn render_comparison(c: &ComparisonReport) -> String {
    let mut s = String::new();
    let fmt_opt = |v: Option<f64>, unit: &str| v.map_or("n/a".to_string(), |v| format!("{v:.6}{unit}"));
    let _ = writeln!(
        s,
        "global best  {} (tolerance {:.1}%)",
        fmt_opt(c.global_best_mean_s, " s"),
        c.tolerance * 100.0
    );
    for (label, run) in [("a", &c.a), ("b", &c.b)] {
        let reached = run.to_within.map_or("never within tolerance".to_string(), |w| {
            format!("within tolerance after {} trials, {:.3} s", w.trials, w.elapsed_s)
        });
        let _ = writeln!(
            s,
            "{label}: {} ({})  best {}  {} trials  {reached}",
            run.run_id,
            run.strategy.label(),
            fmt_opt(run.best_mean_s, " s"),
            run.candidate_trials
        );
    }
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}%", v * 100.0));
    let _ = writeln!(s, "time saving  {}", pct(c.relative_time_saving));
    let _ = writeln!(s, "trial saving {}", pct(c.relative_trial_saving));
    s
}
