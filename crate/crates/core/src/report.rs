//! Post-hoc aggregation of run artifacts: reads per-seed trace CSVs (and
//! run report JSONs when present) from a directory, averages across seeds,
//! and writes a markdown summary plus tidy CSVs for plotting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::{read_trace, RunReport, TraceRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    pub traces_found: usize,
    pub reports_found: usize,
    /// Files that could not be parsed, with the reason; aggregation
    /// proceeds over the rest.
    pub skipped: Vec<(String, String)>,
    pub mean_average_accuracy: Option<f64>,
    pub stderr_average_accuracy: Option<f64>,
    pub per_domain_mean: BTreeMap<u64, f64>,
    pub mean_detections_per_run: Option<f64>,
}

fn discover(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with(prefix) && name.ends_with(suffix) {
            found.push(entry.path());
        }
    }
    found.sort();
    Ok(found)
}

fn mean_and_stderr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

/// Aggregates every `trace_*.csv` / `report_*.json` under `dir`; writes
/// `summary.md` plus three tidy CSVs (statistic/threshold series, memory
/// proportions over time, gradient-variance series). Missing or corrupt
/// files are listed and skipped.
pub fn aggregate(dir: &Path) -> Result<ReportSummary> {
    let mut skipped = Vec::new();

    let mut traces: Vec<(PathBuf, Vec<TraceRow>)> = Vec::new();
    for path in discover(dir, "trace_", ".csv")? {
        match read_trace(&path) {
            Ok(rows) => traces.push((path, rows)),
            Err(e) => skipped.push((path.display().to_string(), e.to_string())),
        }
    }

    let mut reports: Vec<RunReport> = Vec::new();
    for path in discover(dir, "report_", ".json")? {
        let parsed = std::fs::read_to_string(&path)
            .map_err(crate::error::Error::from)
            .and_then(|text| {
                serde_json::from_str::<RunReport>(&text)
                    .map_err(|e| crate::error::Error::invalid(e.to_string()))
            });
        match parsed {
            Ok(r) => reports.push(r),
            Err(e) => skipped.push((path.display().to_string(), e.to_string())),
        }
    }

    // Tidy CSV 1: per-step mean statistic and threshold across seeds.
    let mut stat_by_step: BTreeMap<u64, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    // Tidy CSV 2: per-step per-truth-domain mean stored count.
    let mut counts_by_step: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for (_, rows) in &traces {
        for row in rows {
            let slot = stat_by_step.entry(row.step).or_default();
            if let Some(w) = row.statistic {
                slot.0.push(w);
            }
            if let Some(t) = row.threshold {
                slot.1.push(t);
            }
            if row.detected {
                slot.2 += 1;
            }
            for &(domain, count) in &row.truth_counts {
                counts_by_step
                    .entry((row.step, domain))
                    .or_default()
                    .push(count as f64);
            }
        }
    }

    let file = std::fs::File::create(dir.join("series_statistic.csv"))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "# schema_version=1")?;
    writeln!(out, "step,mean_statistic,mean_threshold,detections")?;
    for (step, (stats, thresholds, det)) in &stat_by_step {
        let (ms, _) = mean_and_stderr(stats);
        let (mt, _) = mean_and_stderr(thresholds);
        writeln!(
            out,
            "{step},{},{},{det}",
            ms.map_or(String::new(), |v| v.to_string()),
            mt.map_or(String::new(), |v| v.to_string()),
        )?;
    }
    out.flush()?;

    let file = std::fs::File::create(dir.join("series_memory.csv"))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "# schema_version=1")?;
    writeln!(out, "step,domain,mean_count")?;
    for ((step, domain), counts) in &counts_by_step {
        let (mc, _) = mean_and_stderr(counts);
        writeln!(out, "{step},{domain},{}", mc.unwrap_or(0.0))?;
    }
    out.flush()?;

    let file = std::fs::File::create(dir.join("series_variance.csv"))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "# schema_version=1")?;
    writeln!(out, "step,mean_plan_trace,mean_uniform_trace")?;
    let mut var_by_step: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for report in &reports {
        for point in &report.gradient_variance {
            let slot = var_by_step.entry(point.step).or_default();
            slot.0.push(point.plan_trace);
            slot.1.push(point.uniform_trace);
        }
    }
    for (step, (plan, uniform)) in &var_by_step {
        let (mp, _) = mean_and_stderr(plan);
        let (mu, _) = mean_and_stderr(uniform);
        writeln!(out, "{step},{},{}", mp.unwrap_or(0.0), mu.unwrap_or(0.0))?;
    }
    out.flush()?;

    let accuracies: Vec<f64> = reports.iter().map(|r| r.average_accuracy).collect();
    let (mean_acc, stderr_acc) = mean_and_stderr(&accuracies);
    let mut per_domain: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for report in &reports {
        for d in &report.per_domain {
            per_domain.entry(d.domain).or_default().push(d.accuracy);
        }
    }
    let per_domain_mean: BTreeMap<u64, f64> = per_domain
        .iter()
        .map(|(d, v)| (*d, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let detections: Vec<f64> = reports
        .iter()
        .map(|r| r.detection.detections.len() as f64)
        .collect();
    let (mean_det, _) = mean_and_stderr(&detections);

    let summary = ReportSummary {
        schema_version: 1,
        traces_found: traces.len(),
        reports_found: reports.len(),
        skipped,
        mean_average_accuracy: mean_acc,
        stderr_average_accuracy: stderr_acc,
        per_domain_mean,
        mean_detections_per_run: mean_det,
    };
    write_markdown(dir, &summary, &reports)?;
    Ok(summary)
}

fn write_markdown(dir: &Path, summary: &ReportSummary, reports: &[RunReport]) -> Result<()> {
    let file = std::fs::File::create(dir.join("summary.md"))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "# Run summary")?;
    writeln!(out)?;
    writeln!(
        out,
        "- traces aggregated: {} | run reports: {}",
        summary.traces_found, summary.reports_found
    )?;
    if let (Some(mean), Some(se)) = (summary.mean_average_accuracy, summary.stderr_average_accuracy)
    {
        writeln!(out, "- average accuracy: {mean:.4} ± {se:.4}")?;
    }
    if let Some(d) = summary.mean_detections_per_run {
        writeln!(out, "- mean detections per run: {d:.2}")?;
    }
    if !summary.per_domain_mean.is_empty() {
        writeln!(out)?;
        writeln!(out, "| domain | mean accuracy |")?;
        writeln!(out, "|--------|---------------|")?;
        for (domain, acc) in &summary.per_domain_mean {
            writeln!(out, "| {domain} | {acc:.4} |")?;
        }
    }
    if !reports.is_empty() {
        writeln!(out)?;
        writeln!(out, "| seed | method | avg accuracy | detections | buffer entropy deficit |")?;
        writeln!(out, "|------|--------|--------------|------------|------------------------|")?;
        for r in reports {
            writeln!(
                out,
                "| {} | {} | {:.4} | {} | {:.4} |",
                r.seed,
                r.method.as_str(),
                r.average_accuracy,
                r.detection.detections.len(),
                r.memory.entropy_deficit
            )?;
        }
    }
    if !summary.skipped.is_empty() {
        writeln!(out)?;
        writeln!(out, "## Skipped files")?;
        for (path, reason) in &summary.skipped {
            writeln!(out, "- `{path}`: {reason}")?;
        }
    }
    writeln!(out)?;
    writeln!(
        out,
        "Tidy series: `series_statistic.csv`, `series_memory.csv`, `series_variance.csv`."
    )?;
    out.flush()?;
    Ok(())
}
