//! Evaluation report output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use udl_core::evaluation::EvaluationReport;

use crate::error::{Error, Result};

pub fn write_report_json(path: &Path, report: &EvaluationReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text + "\n").map_err(Error::io(path))
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

/// Plain-text table: one summary row, then the error histogram.
pub fn format_table(report: &EvaluationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>7} {:>10} {:>10} {:>10} {:>11}",
        "dataset", "pairs", "mean(deg)", "med(deg)", "trans(px)", "correntropy"
    );
    let _ = writeln!(
        s,
        "{:<24} {:>7} {:>10} {:>10} {:>10} {:>11}",
        report.dataset_id,
        report.count,
        cell(report.mean_rotation_error, 2),
        cell(report.median_rotation_error, 2),
        cell(report.mean_translation_error, 2),
        cell(report.mean_correntropy, 4),
    );
    if !report.histogram.is_empty() {
        s.push('\n');
        let _ = writeln!(s, "{:<16} {:>7} {:>8}", "error(deg)", "pairs", "share");
        for b in &report.histogram {
            let share = if report.count > 0 { 100.0 * b.count as f64 / report.count as f64 } else { 0.0 };
            let range = format!("[{}, {})", b.lo, b.hi);
            let _ = writeln!(s, "{range:<16} {:>7} {share:>7.1}%", b.count);
        }
    }
    s
}
