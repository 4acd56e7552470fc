//! Cross-run comparison tables and plot-ready CSV from metrics reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::synthbench::BenchmarkMetrics;

pub const CSV_HEADER: &str = "run_id,bucket,k,accuracy,recall";

/// Test metrics of one run, taken from the summary line of its report.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub run_id: String,
    pub mode: String,
    pub test: BenchmarkMetrics,
}

const SUMMARY_KEYS: [&str; 3] = ["run_id", "mode", "test"];

/// Reads the last `"record": "summary"` line of a JSON-lines report.
pub fn load_run(path: &Path) -> Result<RunMetrics> {
    let text = fsutil::read_to_string(path)?;
    let mut summary = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if v.get("record").and_then(Value::as_str) == Some("summary") {
            summary = Some(v);
        }
    }
    let v = summary
        .ok_or_else(|| Error::Validation(format!("{} has no summary record", path.display())))?;
    let missing: Vec<&str> = SUMMARY_KEYS
        .iter()
        .copied()
        .filter(|k| v.get(k).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "{}: summary record lacks keys {}",
            path.display(),
            missing.join(", ")
        )));
    }
    let test: BenchmarkMetrics = serde_json::from_value(v["test"].clone()).map_err(|e| {
        Error::Validation(format!("{}: malformed test metrics: {e}", path.display()))
    })?;
    Ok(RunMetrics {
        run_id: v["run_id"].as_str().unwrap_or_default().to_string(),
        mode: v["mode"].as_str().unwrap_or_default().to_string(),
        test,
    })
}

fn grid_keys(m: &BenchmarkMetrics) -> BTreeSet<(String, usize)> {
    m.cells.iter().map(|c| (c.bucket.clone(), c.k)).collect()
}

/// All runs must report the same (bucket, k) grid and the same `k_test`.
pub fn check_schema(runs: &[RunMetrics]) -> Result<()> {
    let Some(first) = runs.first() else {
        return Err(Error::Validation(
            "report needs at least one metrics file".into(),
        ));
    };
    let reference = grid_keys(&first.test);
    let mut problems = Vec::new();
    for run in &runs[1..] {
        let keys = grid_keys(&run.test);
        for (b, k) in reference.difference(&keys) {
            problems.push(format!("{}: missing bucket={b} k={k}", run.run_id));
        }
        for (b, k) in keys.difference(&reference) {
            problems.push(format!("{}: unexpected bucket={b} k={k}", run.run_id));
        }
        if run.test.k_test != first.test.k_test {
            problems.push(format!(
                "{}: k_test={} differs from {}",
                run.run_id, run.test.k_test, first.test.k_test
            ));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "metrics schemas differ: {}",
            problems.join("; ")
        )))
    }
}

/// Makes run ids unique by suffixing repeats with `#2`, `#3`, ...
pub fn disambiguate(runs: &mut [RunMetrics]) {
    let mut seen: Vec<String> = Vec::new();
    for run in runs.iter_mut() {
        let base = run.run_id.clone();
        let mut id = base.clone();
        let mut n = 1;
        while seen.contains(&id) {
            n += 1;
            id = format!("{base}#{n}");
        }
        seen.push(id.clone());
        run.run_id = id;
    }
}

/// One row per (run, bucket, k) cell.
pub fn to_csv(runs: &[RunMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for run in runs {
        for c in &run.test.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                run.run_id, c.bucket, c.k, c.accuracy, c.recall
            );
        }
    }
    out
}

fn table(title: &str, row_label: &str, rows: &[(String, Vec<f64>)], runs: &[RunMetrics]) -> String {
    let mut out = format!("{title}\n");
    let _ = write!(out, "{row_label:>10}");
    for run in runs {
        let _ = write!(out, " {:>14}", run.run_id);
    }
    for run in &runs[1..] {
        let _ = write!(out, " {:>14}", format!("Δ {}", run.run_id));
    }
    out.push('\n');
    for (label, values) in rows {
        let _ = write!(out, "{label:>10}");
        for v in values {
            let _ = write!(out, " {v:>14.3}");
        }
        for v in &values[1..] {
            let _ = write!(out, " {:>+14.3}", v - values[0]);
        }
        out.push('\n');
    }
    out
}

/// Accuracy-by-length at each run's `k_test` and overall accuracy-by-k,
/// with deltas against the first run.
pub fn render_tables(runs: &[RunMetrics]) -> String {
    let first = &runs[0].test;
    let by_length: Vec<(String, Vec<f64>)> = first
        .buckets
        .iter()
        .map(|b| {
            let vals = runs
                .iter()
                .map(|r| r.test.bucket_accuracy(&b.bucket).unwrap_or(f64::NAN))
                .collect();
            (b.bucket.clone(), vals)
        })
        .chain(std::iter::once((
            "all".to_string(),
            runs.iter().map(|r| r.test.accuracy).collect(),
        )))
        .collect();
    let by_k: Vec<(String, Vec<f64>)> = first
        .accuracy_by_k
        .iter()
        .map(|&(k, _)| {
            let vals = runs
                .iter()
                .map(|r| {
                    r.test
                        .accuracy_by_k
                        .iter()
                        .find(|(kk, _)| *kk == k)
                        .map_or(f64::NAN, |(_, a)| *a)
                })
                .collect();
            (k.to_string(), vals)
        })
        .collect();
    let mut out = table(
        &format!("accuracy by video length (k={})", first.k_test),
        "frames",
        &by_length,
        runs,
    );
    out.push('\n');
    out.push_str(&table("accuracy by test-time k", "k", &by_k, runs));
    out
}
