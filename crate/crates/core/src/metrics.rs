//! Accuracy matrices and the ACC / BWT summaries computed from them.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// `a[t][i]`: accuracy on task `i` after training task `t`, for `i <= t`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Row for the task just trained; must hold one entry per seen task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return contract(format!(
                "row after task {} needs {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            ));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return contract("accuracies must lie in [0, 1]");
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t)?.get(i).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// `ACC = 1/T * sum_i a[T][i]`.
pub fn compute_acc(m: &AccuracyMatrix) -> Result<f64> {
    let Some(last) = m.rows.last() else {
        return contract("accuracy matrix is empty");
    };
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// `BWT = 1/(T-1) * sum_{i<T} (a[T][i] - a[i][i])`; undefined for one task.
pub fn compute_bwt(m: &AccuracyMatrix) -> Option<f64> {
    let t = m.rows.len();
    if t < 2 {
        return None;
    }
    let last = &m.rows[t - 1];
    let s: f64 = (0..t - 1).map(|i| last[i] - m.rows[i][i]).sum();
    Some(s / (t - 1) as f64)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}
