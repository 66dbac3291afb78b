//! Cross-run comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::metrics::{RunStatus, RunSummary};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub runs: usize,
    pub final_acc_mean: Option<f64>,
    /// Sample standard deviation; zero for a single run.
    pub final_acc_sd: Option<f64>,
    /// Median over runs, counting a run that never reached the target as
    /// infinitely slow. `None` when that median is itself unreached.
    pub rounds_to_target_median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

const HEADER: [&str; 5] = ["algorithm", "runs", "final_acc_mean", "final_acc_sd", "rounds_to_target_median"];

/// Groups successful runs by algorithm; rows are sorted by algorithm name.
pub fn compare_table(summaries: &[RunSummary]) -> ComparisonTable {
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries.iter().filter(|s| s.status == RunStatus::Ok) {
        groups.entry(&s.algorithm).or_default().push(s);
    }
    let rows = groups
        .into_iter()
        .map(|(algorithm, runs)| {
            let accs: Vec<f64> = runs.iter().filter_map(|r| r.final_accuracy).collect();
            let (mean, sd) = mean_sd(&accs);
            let reached: Vec<Option<usize>> = runs.iter().map(|r| r.rounds_to_target).collect();
            ComparisonRow {
                algorithm: algorithm.to_string(),
                runs: runs.len(),
                final_acc_mean: mean,
                final_acc_sd: sd,
                rounds_to_target_median: median_rounds(&reached),
            }
        })
        .collect();
    ComparisonTable { rows }
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(sd))
}

fn median_rounds(values: &[Option<usize>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|r| r.map_or(f64::INFINITY, |x| x as f64)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    m.is_finite().then_some(m)
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl ComparisonTable {
    fn cells(&self) -> Vec<[String; 5]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.algorithm.clone(),
                    r.runs.to_string(),
                    cell(r.final_acc_mean, 4),
                    cell(r.final_acc_sd, 4),
                    cell(r.rounds_to_target_median, 1),
                ]
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER)?;
        for row in self.cells() {
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::io("rendering csv", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let mut widths: Vec<usize> = HEADER.iter().map(|h| h.len()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |fields: Vec<&str>| {
            let parts: Vec<String> = fields
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (f, &w))| if i == 0 { format!("{f:<w$}") } else { format!("{f:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(HEADER.to_vec());
        for row in &cells {
            line(row.iter().map(String::as_str).collect());
        }
        out
    }
}

/// Reads the rows of a `summary.csv`.
pub fn read_summaries<R: Read>(reader: R) -> Result<Vec<RunSummary>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
