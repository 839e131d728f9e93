//! Persistent report formats: evaluation and calibration tables rendered as
//! both JSON and aligned text, plus the CSV side files (training history,
//! reliability bins, probability dumps, overlap scores).

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::calibration::ReliabilityTable;
use crate::error::{Error, Result};
use crate::explain::OverlapStudy;
use crate::pipeline::ablation::AblationTable;
use crate::pipeline::{Metrics, TrainHistory};

// ── JSON / CSV plumbing ─────────────────────────────────────────────────

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::contract("write_json", e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&raw).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Comma-separated rows under a header line. Numeric cells use the shortest
/// exact representation, so parsing them back reproduces values bitwise.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cell(v: f64) -> String {
    format!("{v}")
}

/// Monospace table: first column left-aligned, the rest right-aligned, two
/// spaces between columns.
fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, c) in row.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let mut out = String::new();
    let emit = |cells: Vec<&str>, out: &mut String| {
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                out.push_str(&format!("{c:<w$}", w = widths[0]));
            } else {
                out.push_str(&format!("{c:>w$}", w = widths[i]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    emit(headers.to_vec(), &mut out);
    for row in rows {
        assert_eq!(row.len(), cols, "table rows must match the header");
        emit(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

// ── Evaluation report ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub mean_acc: f64,
    pub test_precision: f64,
    pub test_recall: f64,
    pub test_f1: f64,
}

impl EvalRow {
    pub fn new(model: &str, train: &Metrics, val: &Metrics, test: &Metrics) -> Self {
        EvalRow {
            model: model.to_string(),
            train_acc: train.accuracy,
            val_acc: val.accuracy,
            test_acc: test.accuracy,
            mean_acc: (train.accuracy + val.accuracy + test.accuracy) / 3.0,
            test_precision: test.precision,
            test_recall: test.recall,
            test_f1: test.f1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let headers = [
            "model", "train_acc", "val_acc", "test_acc", "mean_acc", "test_precision",
            "test_recall", "test_f1",
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    fixed(r.train_acc),
                    fixed(r.val_acc),
                    fixed(r.test_acc),
                    fixed(r.mean_acc),
                    fixed(r.test_precision),
                    fixed(r.test_recall),
                    fixed(r.test_f1),
                ]
            })
            .collect();
        render_table(&headers, &rows)
    }
}

// ── Calibration report ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub dataset: String,
    pub ece_uncal: f64,
    pub ece_cal: f64,
    pub pct_decrease: f64,
}

impl CalibrationRow {
    /// An uncalibrated ECE below 1e-12 is float residue from binning, not a
    /// real miscalibration; the percentage of such a baseline is noise, so
    /// the decrease is reported as 0.
    pub fn new(dataset: &str, ece_uncal: f64, ece_cal: f64) -> Self {
        let pct_decrease = if ece_uncal < 1e-12 {
            0.0
        } else {
            (ece_uncal - ece_cal) / ece_uncal * 100.0
        };
        CalibrationRow { dataset: dataset.to_string(), ece_uncal, ece_cal, pct_decrease }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_bins: usize,
    pub platt_a: f64,
    pub platt_b: f64,
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationReport {
    pub fn to_text(&self) -> String {
        let headers = ["dataset", "ece_uncal", "ece_cal", "pct_decrease"];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.dataset.clone(),
                    fixed(r.ece_uncal),
                    fixed(r.ece_cal),
                    fixed(r.pct_decrease),
                ]
            })
            .collect();
        let mut out = render_table(&headers, &rows);
        out.push_str(&format!(
            "platt: a={} b={} bins={}\n",
            fixed(self.platt_a),
            fixed(self.platt_b),
            self.n_bins
        ));
        out
    }
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let headers = ["variant", "train_acc", "val_acc", "test_acc", "mean_acc"];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.clone(),
                    fixed(r.train_acc),
                    fixed(r.val_acc),
                    fixed(r.test_acc),
                    fixed(r.mean_acc),
                ]
            })
            .collect();
        format!("{}\n{}", self.title, render_table(&headers, &rows))
    }
}

// ── CSV side files ──────────────────────────────────────────────────────

pub fn history_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                cell(e.train_loss),
                cell(e.train_acc),
                cell(e.val_loss),
                cell(e.val_acc),
            ]
        })
        .collect();
    write_csv(path, "epoch,train_loss,train_acc,val_loss,val_acc", &rows)
}

pub fn reliability_csv(path: &Path, table: &ReliabilityTable) -> Result<()> {
    let rows: Vec<Vec<String>> = table
        .bins
        .iter()
        .map(|b| {
            vec![cell(b.lo), cell(b.hi), b.count.to_string(), cell(b.accuracy), cell(b.confidence)]
        })
        .collect();
    write_csv(path, "bin_lo,bin_hi,count,accuracy,confidence", &rows)
}

/// One scored sample: uncalibrated and calibrated fake-class probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbRow {
    pub id: String,
    pub label: u8,
    pub score: f64,
    pub prob_uncal: f64,
    pub prob_cal: f64,
}

pub fn probs_csv(path: &Path, rows: &[ProbRow]) -> Result<()> {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                r.label.to_string(),
                cell(r.score),
                cell(r.prob_uncal),
                cell(r.prob_cal),
            ]
        })
        .collect();
    write_csv(path, "id,label,score,prob_uncal,prob_cal", &cells)
}

pub fn overlap_csv(path: &Path, study: &OverlapStudy) -> Result<()> {
    let rows: Vec<Vec<String>> = study
        .rows
        .iter()
        .map(|r| vec![r.id.clone(), cell(r.overlap), cell(r.random_mean)])
        .collect();
    write_csv(path, "id,overlap,random_mean", &rows)
}
