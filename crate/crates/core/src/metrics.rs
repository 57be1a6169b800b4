//! Accuracy bookkeeping over a task stream and the two summary metrics:
//! average performance (mean accuracy over all seen tasks) and average
//! forgetting (mean drop from each task's just-trained accuracy).

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{NormalizedAdjacency, TaskSchedule};
use crate::model::{self, ClassMask, ModelParams};

/// Lower-triangular matrix of accuracies in percent: row `t` holds the
/// accuracy of every task `i <= t` after training task `t` (0-based).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut matrix = Self::new();
        for row in rows {
            matrix.push_row(row)?;
        }
        Ok(matrix)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|&a| !(0.0..=100.0).contains(&a)) {
            return Err(Error::InvalidArg(
                "accuracies must lie in [0, 100] percent".into(),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Accuracy of task `i` after training task `t`, both 0-based.
    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.rows[t][i]
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Mean accuracy over all tasks seen through task `t` (0-based).
pub fn average_performance(matrix: &AccuracyMatrix, t: usize) -> f64 {
    let row = &matrix.rows()[t];
    row.iter().sum::<f64>() / row.len() as f64
}

/// Mean accuracy change on earlier tasks relative to their just-trained
/// accuracy; negative values mean forgetting. Undefined for the first task.
pub fn average_forgetting(matrix: &AccuracyMatrix, t: usize) -> Option<f64> {
    if t == 0 {
        return None;
    }
    let sum: f64 = (0..t).map(|i| matrix.get(t, i) - matrix.get(i, i)).sum();
    Some(sum / t as f64)
}

/// Accuracy in percent of `params` on the listed nodes.
pub fn split_accuracy(
    params: &ModelParams,
    adjacency: &NormalizedAdjacency,
    features: &DMatrix<f64>,
    labels: &[usize],
    nodes: &[usize],
    mask: &ClassMask,
) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::InvalidArg("cannot score an empty split".into()));
    }
    let predictions = model::predict(params, adjacency, features, mask)?;
    let correct = nodes
        .iter()
        .filter(|&&v| predictions[v] == labels[v])
        .count();
    Ok(100.0 * correct as f64 / nodes.len() as f64)
}

/// Test accuracy of every task `0..=upto` on its own stored subgraph, with
/// predictions restricted to the classes of tasks `0..=upto`.
pub fn evaluate(params: &ModelParams, schedule: &TaskSchedule, upto: usize) -> Result<Vec<f64>> {
    let mask = ClassMask::from_classes(&schedule.classes_through(upto), params.num_classes())?;
    schedule.tasks()[..=upto]
        .iter()
        .map(|task| {
            split_accuracy(
                params,
                task.adjacency(),
                task.graph().features(),
                task.graph().labels(),
                task.test_nodes(),
                &mask,
            )
        })
        .collect()
}

/// Write the accuracy matrix as CSV: header `after_task,task_1,...,task_T`,
/// one row per training step, upper-triangular cells blank.
pub fn emit_heatmap(matrix: &AccuracyMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_to_string(matrix))?;
    Ok(())
}

pub fn heatmap_to_string(matrix: &AccuracyMatrix) -> String {
    let t_max = matrix.num_tasks();
    let mut out = String::from("after_task");
    for i in 1..=t_max {
        out.push_str(&format!(",task_{i}"));
    }
    out.push('\n');
    for (t, row) in matrix.rows().iter().enumerate() {
        out.push_str(&(t + 1).to_string());
        for value in row {
            out.push_str(&format!(",{value}"));
        }
        for _ in row.len()..t_max {
            out.push(',');
        }
        out.push('\n');
    }
    out
}

/// Parse a heatmap CSV back into an accuracy matrix.
pub fn parse_heatmap(path: &Path) -> Result<AccuracyMatrix> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: display.clone(),
        line: 1,
        msg: "empty heatmap file".into(),
    })?;
    if !header.starts_with("after_task") {
        return Err(Error::Parse {
            path: display,
            line: 1,
            msg: "missing after_task header".into(),
        });
    }
    let mut matrix = AccuracyMatrix::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let row: Vec<f64> = cells[1..]
            .iter()
            .take_while(|c| !c.is_empty())
            .map(|c| {
                c.parse::<f64>().map_err(|_| Error::Parse {
                    path: display.clone(),
                    line: idx + 1,
                    msg: format!("bad accuracy value {c:?}"),
                })
            })
            .collect::<Result<_>>()?;
        matrix.push_row(row)?;
    }
    Ok(matrix)
}
