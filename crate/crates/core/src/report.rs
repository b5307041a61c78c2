//! Run reports, strategy comparisons, and series export.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{best_trial, improvement_percent, time_to_within, WithinTarget};
use crate::runspec::Strategy;
use crate::space::{Configuration, SpaceError};
use crate::store::RunLog;
use crate::trial::Trial;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("run has no baseline trial")]
    NoBaseline,
    #[error("baseline trial is incomplete ({0})")]
    BaselineIncomplete(String),
    #[error("runs cover different search spaces")]
    MismatchedSpaces,
    #[error("runs use different baseline configurations")]
    MismatchedBaselines,
    #[error("unknown export format {0:?} (expected csv or svg)")]
    UnknownFormat(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_id: u64,
    pub config_index: u64,
    pub configuration: Configuration,
    pub mean_s: f64,
}

impl TrialSummary {
    fn of(trial: &Trial, mean_s: f64) -> Self {
        TrialSummary {
            trial_id: trial.trial_id,
            config_index: trial.config_index,
            configuration: trial.configuration.clone(),
            mean_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    /// 1-based position in the sorted series.
    pub rank: usize,
    pub trial_id: u64,
    pub config_index: u64,
    /// Absent for Incomplete trials.
    pub mean_s: Option<f64>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialCounts {
    pub complete: usize,
    pub incomplete: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub strategy: Strategy,
    pub baseline: TrialSummary,
    pub best: Option<TrialSummary>,
    pub improvement_percent: Option<f64>,
    /// Complete trials ascending by mean (ties by trial id), then the
    /// Incomplete trials in trial-id order.
    pub sorted_series: Vec<SeriesPoint>,
    pub counts: TrialCounts,
    pub total_elapsed_s: f64,
}

/// Builds the report for a run from its trials (baseline included).
pub fn build_report(
    run_id: &str,
    strategy: Strategy,
    trials: &[Trial],
) -> Result<RunReport, ReportError> {
    let baseline = trials.iter().find(|t| t.baseline).ok_or(ReportError::NoBaseline)?;
    let baseline_mean = baseline.mean().ok_or_else(|| {
        ReportError::BaselineIncomplete(baseline.status.reason().unwrap_or("no stats").to_string())
    })?;
    let candidates: Vec<&Trial> = trials.iter().filter(|t| !t.baseline).collect();

    let mut complete: Vec<(&Trial, f64)> = candidates
        .iter()
        .filter_map(|t| t.mean().map(|m| (*t, m)))
        .collect();
    complete.sort_by(|(a, ma), (b, mb)| ma.total_cmp(mb).then(a.trial_id.cmp(&b.trial_id)));
    let mut incomplete: Vec<&Trial> = candidates.iter().copied().filter(|t| t.mean().is_none()).collect();
    incomplete.sort_by_key(|t| t.trial_id);

    let sorted_series = complete
        .iter()
        .map(|&(t, m)| (t, Some(m)))
        .chain(incomplete.iter().map(|&t| (t, None)))
        .enumerate()
        .map(|(i, (t, mean_s))| SeriesPoint {
            rank: i + 1,
            trial_id: t.trial_id,
            config_index: t.config_index,
            mean_s,
            complete: mean_s.is_some(),
            reason: t.status.reason().map(str::to_string),
        })
        .collect();

    let best = best_trial(candidates.iter().copied())
        .map(|t| TrialSummary::of(t, t.mean().expect("complete")));
    let improvement = best
        .as_ref()
        .map(|b| improvement_percent(baseline_mean, b.mean_s).expect("baseline mean positive"));

    Ok(RunReport {
        run_id: run_id.to_string(),
        strategy,
        baseline: TrialSummary::of(baseline, baseline_mean),
        best,
        improvement_percent: improvement,
        sorted_series,
        counts: TrialCounts {
            complete: complete.len(),
            incomplete: incomplete.len(),
        },
        total_elapsed_s: trials.iter().map(|t| t.elapsed_s).sum(),
    })
}

impl RunLog {
    pub fn report(&self) -> Result<RunReport, ReportError> {
        build_report(&self.header.run_id, self.header.strategy, &self.trials)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub run_id: String,
    pub strategy: Strategy,
    pub best_mean_s: Option<f64>,
    pub improvement_percent: Option<f64>,
    pub candidate_trials: usize,
    pub total_elapsed_s: f64,
    /// Cost to first reach within `tolerance` of the global best.
    pub to_within: Option<WithinTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tolerance: f64,
    pub global_best_mean_s: Option<f64>,
    pub a: RunComparison,
    pub b: RunComparison,
    /// `1 − elapsed_b / elapsed_a` to reach within tolerance.
    pub relative_time_saving: Option<f64>,
    /// Same ratio measured in candidate trials.
    pub relative_trial_saving: Option<f64>,
}

/// Compares two runs over the same space and baseline, typically a grid
/// run (`a`) against a random run (`b`).
pub fn compare_runs(a: &RunLog, b: &RunLog, tolerance: f64) -> Result<ComparisonReport, ReportError> {
    if a.header.space()? != b.header.space()? {
        return Err(ReportError::MismatchedSpaces);
    }
    let report_a = a.report()?;
    let report_b = b.report()?;
    if report_a.baseline.configuration != report_b.baseline.configuration {
        return Err(ReportError::MismatchedBaselines);
    }
    let global_best = [&report_a.best, &report_b.best]
        .into_iter()
        .flatten()
        .map(|s| s.mean_s)
        .min_by(f64::total_cmp);

    let summarize = |log: &RunLog, report: &RunReport| RunComparison {
        run_id: report.run_id.clone(),
        strategy: report.strategy,
        best_mean_s: report.best.as_ref().map(|s| s.mean_s),
        improvement_percent: report.improvement_percent,
        candidate_trials: report.sorted_series.len(),
        total_elapsed_s: report.total_elapsed_s,
        to_within: global_best.and_then(|g| time_to_within(&log.trials, g, tolerance)),
    };
    let sa = summarize(a, &report_a);
    let sb = summarize(b, &report_b);
    let saving = |num: f64, den: f64| (den > 0.0).then(|| 1.0 - num / den);
    let (relative_time_saving, relative_trial_saving) = match (sa.to_within, sb.to_within) {
        (Some(wa), Some(wb)) => (
            saving(wb.elapsed_s, wa.elapsed_s),
            saving(wb.trials as f64, wa.trials as f64),
        ),
        _ => (None, None),
    };
    Ok(ComparisonReport {
        tolerance,
        global_best_mean_s: global_best,
        a: sa,
        b: sb,
        relative_time_saving,
        relative_trial_saving,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Svg,
}

impl FromStr for ExportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, ReportError> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "svg" => Ok(ExportFormat::Svg),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }
}

pub fn export_series(report: &RunReport, format: ExportFormat) -> String {
    match format {
        ExportFormat::Csv => series_csv(report),
        ExportFormat::Svg => series_svg(report),
    }
}

fn series_csv(report: &RunReport) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["rank", "config_index", "mean_s", "status"])
        .expect("in-memory write");
    for p in &report.sorted_series {
        out.write_record([
            p.rank.to_string(),
            p.config_index.to_string(),
            p.mean_s.map(|m| m.to_string()).unwrap_or_default(),
            if p.complete { "complete" } else { "incomplete" }.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(out.into_inner().expect("in-memory flush")).expect("utf-8")
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

/// Sorted-latency chart: the Complete curve, a horizontal baseline line,
/// and a shaded band over the trailing Incomplete ranks.
fn series_svg(report: &RunReport) -> String {
    let n = report.sorted_series.len().max(1) as f64;
    let baseline = report.baseline.mean_s;
    let means: Vec<f64> = report.sorted_series.iter().filter_map(|p| p.mean_s).collect();
    let lo = means.iter().copied().fold(baseline, f64::min);
    let hi = means.iter().copied().fold(baseline, f64::max);
    let pad = ((hi - lo) * 0.1).max(hi.abs() * 0.01).max(1e-9);
    let (y_lo, y_hi) = (lo - pad, hi + pad);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    // Ranks are centred in equal-width slots.
    let x = |rank: f64| LEFT + (rank - 0.5) / n * plot_w;
    let y = |v: f64| TOP + (y_hi - v) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<title>Run {} ({}): mean latency per configuration, sorted</title>"#,
        escape(&report.run_id),
        report.strategy.label()
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    if report.counts.incomplete > 0 {
        let first = (report.counts.complete + 1) as f64;
        let x0 = x(first) - 0.5 / n * plot_w;
        let w = report.counts.incomplete as f64 / n * plot_w;
        let _ = writeln!(
            svg,
            r##"<rect class="incomplete" data-count="{}" x="{x0:.2}" y="{TOP}" width="{w:.2}" height="{plot_h}" fill="#d62728" fill-opacity="0.2"/>"##,
            report.counts.incomplete
        );
    }

    let _ = writeln!(
        svg,
        r#"<line class="axis" x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    );
    let _ = writeln!(
        svg,
        r#"<line class="axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        TOP + plot_h
    );
    for i in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.4}</text>"#,
            LEFT - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">configurations sorted by mean latency</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">mean latency (s)</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    if !means.is_empty() {
        let points: Vec<String> = means
            .iter()
            .enumerate()
            .map(|(i, &m)| format!("{:.2},{:.2}", x(i as f64 + 1.0), y(m)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline class="series" points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
            points.join(" ")
        );
    }

    let by = y(baseline);
    let _ = writeln!(
        svg,
        r##"<line class="baseline" data-mean="{baseline}" x1="{LEFT}" y1="{by:.2}" x2="{}" y2="{by:.2}" stroke="#d62728" stroke-width="1.5"/>"##,
        LEFT + plot_w
    );
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="{:.2}" text-anchor="end" fill="#d62728">baseline {baseline:.4} s</text>"##,
        LEFT + plot_w - 4.0,
        by - 4.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
