//! CSV and JSON outputs of the commands.
//!
//! | file | columns |
//! |---|---|
//! | `metrics.csv` | epoch, cls, distill, mapping, total, train_accuracy |
//! | `steps.csv` | step, epoch, lr, cls, distill, mapping, total, clamped |
//! | `pretrain_loss.csv` | step, loss |
//! | `ablation.csv` | method, shots, mean, std, runs |
//! | `ablation_runs.csv` | method, shots, seed, accuracy, sparsity |
//! | `trace.csv` | epoch, class, prompt, weight, similarity |
//! | `trace_summary.csv` | epoch, prompt, weight, similarity |
//!
//! Accuracies are fractions in [0, 1]. `similarity` is the cosine between
//! a prompt's text embedding (without class token) and the class-name
//! embedding; `trace_summary.csv` averages it and the weight over classes.

use std::path::Path;

use demul_core::eval::{AblationTable, EvalResult, TraceRow};
use demul_core::trainer::TrainState;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Serialize)]
struct MetricsRow {
    epoch: u64,
    cls: f64,
    distill: f64,
    mapping: f64,
    total: f64,
    train_accuracy: f64,
}

#[derive(Serialize)]
struct StepRow {
    step: u64,
    epoch: u64,
    lr: f64,
    cls: f64,
    distill: f64,
    mapping: f64,
    total: f64,
    clamped: u64,
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct AblationCsvRow<'a> {
    method: &'a str,
    shots: usize,
    mean: f64,
    std: f64,
    runs: usize,
}

#[derive(Serialize)]
struct RunRow<'a> {
    method: &'a str,
    shots: usize,
    seed: u64,
    accuracy: f64,
    sparsity: f64,
}

#[derive(Serialize)]
struct TraceCsvRow {
    epoch: u64,
    class: usize,
    prompt: usize,
    weight: f64,
    similarity: f64,
}

#[derive(Serialize)]
struct TraceSummaryRow {
    epoch: u64,
    prompt: usize,
    weight: f64,
    similarity: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics(path: &Path, state: &TrainState) -> Result<()> {
    write_rows(
        path,
        state.metrics.iter().map(|m| MetricsRow {
            epoch: m.epoch,
            cls: m.cls,
            distill: m.distill,
            mapping: m.mapping,
            total: m.total,
            train_accuracy: m.train_accuracy,
        }),
    )
}

pub fn write_steps(path: &Path, state: &TrainState) -> Result<()> {
    write_rows(
        path,
        state.history.iter().map(|h| StepRow {
            step: h.step,
            epoch: h.epoch,
            lr: h.lr,
            cls: h.cls,
            distill: h.distill,
            mapping: h.mapping,
            total: h.total,
            clamped: h.clamped,
        }),
    )
}

pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    write_rows(
        path,
        trace.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }),
    )
}

pub fn write_ablation(path: &Path, table: &AblationTable) -> Result<()> {
    write_rows(
        path,
        table.rows.iter().map(|r| AblationCsvRow {
            method: r.method.name(),
            shots: r.shots,
            mean: r.mean,
            std: r.std,
            runs: r.runs,
        }),
    )
}

pub fn write_runs(path: &Path, results: &[EvalResult]) -> Result<()> {
    write_rows(
        path,
        results.iter().map(|r| RunRow {
            method: r.method.name(),
            shots: r.shots,
            seed: r.seed,
            accuracy: r.accuracy,
            sparsity: r.sparsity,
        }),
    )
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_rows(
        path,
        rows.iter().filter_map(|r| {
            r.class.map(|class| TraceCsvRow {
                epoch: r.epoch,
                class,
                prompt: r.prompt,
                weight: r.weight,
                similarity: r.similarity,
            })
        }),
    )
}

pub fn write_trace_summary(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_rows(
        path,
        rows.iter().map(|r| TraceSummaryRow {
            epoch: r.epoch,
            prompt: r.prompt,
            weight: r.weight,
            similarity: r.similarity,
        }),
    )
}

/// Contents of `summary.json` after `train`.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct TrainSummary {
    pub seed: u64,
    pub shots: usize,
    pub method: String,
    pub steps: u64,
    pub epochs: u64,
    pub final_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub sparsity: f64,
    pub zero_shot_accuracy: f64,
    pub completed: bool,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Report(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use demul_core::eval::{AblationRow, Method};

    #[test]
    fn ablation_csv_has_table_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        let table = AblationTable {
            results: vec![],
            rows: vec![AblationRow {
                method: Method::Full,
                shots: 8,
                mean: 0.5,
                std: 0.25,
                runs: 3,
            }],
        };
        write_ablation(&path, &table).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "method,shots,mean,std,runs\nfull,8,0.5,0.25,3\n");
    }

    #[test]
    fn loss_trace_rows_are_numbered_from_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_trace(&path, &[1.0, 0.5]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "step,loss\n0,1.0\n1,0.5\n");
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = write_loss_trace(Path::new("/nonexistent-dir/x.csv"), &[1.0]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
