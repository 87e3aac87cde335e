//! CSV report writers. Floats print in shortest round-trip form; string
//! fields are quoted only when they contain a delimiter, quote, or
//! newline, so the common case stays clean to read.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use embedkit_core::bench::ThroughputReport;
use embedkit_core::eval::{MetricReport, SweepReport};
use embedkit_core::trainer::RoutingRecord;
use embedkit_core::vocab::FertilityReport;

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `step,loss` with steps counted from zero, matching optimizer steps.
pub fn save_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (step, loss) in trace.iter().enumerate() {
        writeln!(text, "{step},{loss}").unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing loss trace {}", path.display()))
}

/// `step,language,teacher`, one row per training step of a distillation.
pub fn save_routing(path: &Path, routing: &[RoutingRecord]) -> Result<()> {
    let mut text = String::from("step,language,teacher\n");
    for r in routing {
        writeln!(text, "{},{},{}", r.step, csv_field(&r.language), csv_field(&r.teacher)).unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing routing audit {}", path.display()))
}

/// One header row of language names plus `Avg.`, one data row of
/// tokens-per-word values.
pub fn save_fertility_csv(path: &Path, report: &FertilityReport) -> Result<()> {
    let mut header = Vec::new();
    let mut values = Vec::new();
    for row in &report.rows {
        header.push(csv_field(&row.language));
        values.push(format!("{:.2}", row.fertility));
    }
    header.push("Avg.".to_string());
    values.push(format!("{:.2}", report.average));
    let text = format!("{}\n{}\n", header.join(","), values.join(","));
    fs::write(path, text).with_context(|| format!("writing fertility report {}", path.display()))
}

/// Per-query scores under an `id,score` header, closed by a `mean` row.
pub fn save_metric_report(path: &Path, metric: &str, report: &MetricReport) -> Result<()> {
    let mut text = format!("id,{}\n", csv_field(metric));
    for (query, score) in &report.per_query {
        writeln!(text, "{},{score}", csv_field(query)).unwrap();
    }
    writeln!(text, "mean,{}", report.mean).unwrap();
    fs::write(path, text).with_context(|| format!("writing metric report {}", path.display()))
}

/// One row per swept value: the axis column, each task's score, the mean.
pub fn save_sweep_csv(path: &Path, report: &SweepReport) -> Result<()> {
    let mut text = csv_field(&report.axis);
    if let Some(first) = report.rows.first() {
        for task in first.per_task.keys() {
            text.push(',');
            text.push_str(&csv_field(task));
        }
    }
    text.push_str(",mean\n");
    for row in &report.rows {
        write!(text, "{}", row.value).unwrap();
        for score in row.per_task.values() {
            write!(text, ",{score}").unwrap();
        }
        writeln!(text, ",{}", row.mean).unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing sweep report {}", path.display()))
}

/// One row per measured run: strategy, document and padding-token counts,
/// timing, and the optional percentage against a reference run.
pub fn save_bench_csv(path: &Path, rows: &[(ThroughputReport, usize)]) -> Result<()> {
    let mut text = String::from(
        "strategy,total_docs,padding_tokens,wall_seconds,docs_per_second,relative_percent\n",
    );
    for (report, padding) in rows {
        let relative = report
            .relative_percent
            .map(|p| p.to_string())
            .unwrap_or_default();
        writeln!(
            text,
            "{},{},{padding},{},{},{relative}",
            report.strategy.as_str(),
            report.total_docs,
            report.wall_seconds,
            report.docs_per_second,
        )
        .unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing bench report {}", path.display()))
}

/// `target,max_rel_error,coords,tolerance,pass` per checked gradient.
pub fn save_gradcheck_csv(
    path: &Path,
    rows: &[(String, f64, usize, f64)],
) -> Result<()> {
    let mut text = String::from("target,max_rel_error,coords,tolerance,pass\n");
    for (target, err, coords, tolerance) in rows {
        writeln!(
            text,
            "{},{err},{coords},{tolerance},{}",
            csv_field(target),
            err <= tolerance
        )
        .unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing gradient report {}", path.display()))
}
