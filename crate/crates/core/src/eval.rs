//! Accuracy, train × test generalization matrices, and comparison reports.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::{greedy_decode, PolicyParams};
use crate::task::{SplitDataset, VqaItem, LETTERS};
use crate::trainer::{GrpoConfig, TrainLog, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl EvalResult {
    pub fn from_counts(correct: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("test", "no test items"));
        }
        Ok(EvalResult {
            n,
            correct,
            accuracy: correct as f64 / n as f64,
        })
    }
}

/// Greedy answer letter for every item.
pub fn predict(policy: &PolicyParams, items: &[VqaItem]) -> Result<Vec<char>> {
    items
        .iter()
        .map(|it| Ok(LETTERS[greedy_decode(policy, it)?.answer]))
        .collect()
}

pub fn evaluate_accuracy(policy: &PolicyParams, test: &[VqaItem]) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::invalid("test", "no test items"));
    }
    let predictions = predict(policy, test)?;
    let correct = predictions
        .iter()
        .zip(test)
        .filter(|(p, it)| it.answer.starts_with(**p))
        .count();
    EvalResult::from_counts(correct, test.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub overall_row: Vec<f64>,
    pub overall_col: Vec<f64>,
    pub grand_overall: f64,
}

/// Row means, column means, and the mean of the row means.
pub fn overall_aggregates(cells: &[Vec<f64>]) -> Result<Aggregates> {
    let cols = cells.first().map_or(0, Vec::len);
    if cols == 0 {
        return Err(Error::invalid("cells", "empty matrix"));
    }
    if cells.iter().any(|row| row.len() != cols) {
        return Err(Error::invalid("cells", "matrix is not rectangular"));
    }
    let mean = |v: &mut dyn Iterator<Item = f64>, n: usize| v.sum::<f64>() / n as f64;
    let overall_row: Vec<f64> = cells
        .iter()
        .map(|row| mean(&mut row.iter().copied(), cols))
        .collect();
    let overall_col = (0..cols)
        .map(|j| mean(&mut cells.iter().map(|row| row[j]), cells.len()))
        .collect();
    let grand_overall = mean(&mut overall_row.iter().copied(), overall_row.len());
    Ok(Aggregates {
        overall_row,
        overall_col,
        grand_overall,
    })
}

/// Accuracy percent for every (train label, test label) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralizationMatrix {
    pub labels: Vec<String>,
    pub cells: Vec<Vec<f64>>,
    pub overall_row: Vec<f64>,
    pub overall_col: Vec<f64>,
    pub grand_overall: f64,
}

impl GeneralizationMatrix {
    pub fn from_cells(labels: Vec<String>, cells: Vec<Vec<f64>>) -> Result<Self> {
        let agg = overall_aggregates(&cells)?;
        Ok(GeneralizationMatrix {
            labels,
            cells,
            overall_row: agg.overall_row,
            overall_col: agg.overall_col,
            grand_overall: agg.grand_overall,
        })
    }

    pub fn diagonal_mean(&self) -> f64 {
        let n = self.labels.len();
        (0..n).map(|i| self.cells[i][i]).sum::<f64>() / n as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.labels.len();
        let total: f64 = self.cells.iter().flatten().sum();
        (total - self.diagonal_mean() * n as f64) / (n * n - n) as f64
    }

    /// Header of test labels, one row per train label, Overall row and column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train\\test");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push_str(",Overall\n");
        for (label, (row, overall)) in self.labels.iter().zip(self.cells.iter().zip(&self.overall_row)) {
            out.push_str(&csv_field(label));
            for v in row {
                write!(out, ",{v:.2}").unwrap();
            }
            writeln!(out, ",{overall:.2}").unwrap();
        }
        out.push_str("Overall");
        for v in &self.overall_col {
            write!(out, ",{v:.2}").unwrap();
        }
        writeln!(out, ",{:.2}", self.grand_overall).unwrap();
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Output of one row of a cross-domain run.
#[derive(Debug, Clone)]
pub struct TrainedRow {
    pub label: String,
    pub policy: PolicyParams,
    pub log: TrainLog,
}

/// Trains one policy per label and evaluates it on every label's test split.
///
/// `jobs` bounds the number of rows trained concurrently; results do not
/// depend on it.
pub fn cross_matrix(
    suite: &IndexMap<String, SplitDataset>,
    cfg: &GrpoConfig,
    trainer: Trainer,
    jobs: usize,
) -> Result<(GeneralizationMatrix, Vec<TrainedRow>)> {
    if suite.len() < 2 {
        return Err(Error::invalid(
            "domains",
            format!("cross evaluation needs at least 2 domains, found {}", suite.len()),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid("jobs", e.to_string()))?;
    let rows: Vec<(Vec<f64>, TrainedRow)> = pool.install(|| {
        let entries: Vec<_> = suite.iter().collect();
        entries
            .into_par_iter()
            .map(|(label, split)| {
                let (policy, log) = trainer.train(split, cfg)?;
                let cells = suite
                    .values()
                    .map(|test| Ok(100.0 * evaluate_accuracy(&policy, &test.test)?.accuracy))
                    .collect::<Result<Vec<f64>>>()?;
                Ok((
                    cells,
                    TrainedRow {
                        label: label.clone(),
                        policy,
                        log,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (cells, trained): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let matrix = GeneralizationMatrix::from_cells(suite.keys().cloned().collect(), cells)?;
    Ok((matrix, trained))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

/// Per-column marks: `*` best, `+` second best. Ties go to the earlier method.
fn column_marks(values: &[f64]) -> Vec<&'static str> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut marks = vec![""; values.len()];
    if let Some(&best) = order.first() {
        marks[best] = "*";
    }
    if let Some(&second) = order.get(1) {
        marks[second] = "+";
    }
    marks
}

/// Methods as rows, metric columns, best/second-best marked per column.
pub fn comparison_report(columns: &[String], results: &[(String, Vec<f64>)]) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::invalid("methods", "no methods to compare"));
    }
    if let Some((name, _)) = results.iter().find(|(_, v)| v.len() != columns.len()) {
        return Err(Error::invalid(
            "methods",
            format!("{name} has a different column count"),
        ));
    }
    let marks: Vec<Vec<&str>> = (0..columns.len())
        .map(|j| column_marks(&results.iter().map(|(_, v)| v[j]).collect::<Vec<_>>()))
        .collect();
    let cell = |i: usize, j: usize| format!("{:.2}{}", results[i].1[j], marks[j][i]);

    let name_width = results
        .iter()
        .map(|(n, _)| n.len())
        .chain(["Method".len()])
        .max()
        .unwrap();
    let col_width: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(j, c)| (0..results.len()).map(|i| cell(i, j).len()).chain([c.len()]).max().unwrap())
        .collect();

    let mut text = format!("{:<name_width$}", "Method");
    let mut csv = String::from("method");
    for (c, w) in columns.iter().zip(&col_width) {
        write!(text, "  {c:>w$}").unwrap();
        write!(csv, ",{}", csv_field(c)).unwrap();
    }
    text.push('\n');
    csv.push('\n');
    for (i, (name, _)) in results.iter().enumerate() {
        write!(text, "{name:<name_width$}").unwrap();
        csv.push_str(&csv_field(name));
        for (j, w) in col_width.iter().enumerate() {
            write!(text, "  {:>w$}", cell(i, j)).unwrap();
            write!(csv, ",{}", cell(i, j)).unwrap();
        }
        text.push('\n');
        csv.push('\n');
    }
    text.push_str("* best, + second best\n");
    Ok(Report { text, csv })
}
