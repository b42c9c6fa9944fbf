//! Result matrix and the ACC / FWT / BWT summaries.

use serde::{Deserialize, Serialize};

/// Running mean; exact for constant input.
#[derive(Default)]
struct Mean {
    value: f64,
    count: usize,
}

impl Mean {
    fn push(&mut self, x: f64) {
        self.count += 1;
        self.value += (x - self.value) / self.count as f64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("R[{0}][{1}] is not populated")]
pub struct MissingEntry(pub usize, pub usize);

/// `R[i][j]`: score on task `j` after training task `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub r: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    /// `None` when no `i < j` entry was evaluated.
    pub fwt: Option<f64>,
    pub bwt: f64,
}

impl ResultMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            r: vec![vec![None; tasks]; tasks],
        }
    }

    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Self {
        Self { r: rows.to_vec() }
    }

    pub fn tasks(&self) -> usize {
        self.r.len()
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.r[i][j] = Some(v);
    }

    pub fn get(&self, i: usize, j: usize) -> Result<f64, MissingEntry> {
        self.r.get(i).and_then(|row| row.get(j).copied().flatten()).ok_or(MissingEntry(i, j))
    }

    /// Rows `0..=last` of the lower triangle are populated.
    pub fn lower_complete(&self, last: usize) -> bool {
        (0..=last).all(|i| (0..=i).all(|j| self.get(i, j).is_ok()))
    }

    /// Mean over the lower triangle `i ≥ j` (divided by its entry count).
    pub fn acc(&self) -> Result<f64, MissingEntry> {
        let mut mean = Mean::default();
        for i in 0..self.tasks() {
            for j in 0..=i {
                mean.push(self.get(i, j)?);
            }
        }
        Ok(mean.value)
    }

    /// Mean over `i < j`; `None` if those entries were not evaluated.
    pub fn fwt(&self) -> Option<f64> {
        let n = self.tasks();
        if n < 2 {
            return None;
        }
        let mut mean = Mean::default();
        for i in 0..n {
            for j in i + 1..n {
                mean.push(self.get(i, j).ok()?);
            }
        }
        Some(mean.value)
    }

    /// `Σ_{i>j} (R_ij - R_jj) / (N(N-1)/2)`; zero for a single task.
    pub fn bwt(&self) -> Result<f64, MissingEntry> {
        let n = self.tasks();
        if n < 2 {
            return Ok(0.0);
        }
        let mut mean = Mean::default();
        for i in 1..n {
            for j in 0..i {
                mean.push(self.get(i, j)? - self.get(j, j)?);
            }
        }
        Ok(mean.value)
    }

    /// Mean of the final row.
    pub fn final_acc(&self) -> Result<f64, MissingEntry> {
        let n = self.tasks();
        let mut mean = Mean::default();
        for j in 0..n {
            mean.push(self.get(n - 1, j)?);
        }
        Ok(mean.value)
    }

    pub fn metrics(&self) -> Result<Metrics, MissingEntry> {
        Ok(Metrics {
            acc: self.acc()?,
            fwt: self.fwt(),
            bwt: self.bwt()?,
        })
    }
}
