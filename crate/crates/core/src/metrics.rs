//! Per-client, per-step task accuracies and the summary metrics built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `acc[k][t][i]`: accuracy of client `k` on its task `i` after step `t`,
/// defined for `i <= t`; `counts[k][i]`: test samples of that task.
/// Steps and tasks are zero-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    acc: Vec<Vec<Vec<Option<f64>>>>,
    counts: Vec<Vec<usize>>,
}

impl AccuracyMatrix {
    pub fn new(num_clients: usize, num_steps: usize) -> Self {
        Self {
            acc: (0..num_clients)
                .map(|_| (0..num_steps).map(|t| vec![None; t + 1]).collect())
                .collect(),
            counts: vec![vec![0; num_steps]; num_clients],
        }
    }

    pub fn num_clients(&self) -> usize {
        self.acc.len()
    }

    pub fn num_steps(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn set_count(&mut self, client: usize, task: usize, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::IncompleteMatrix(format!(
                "client {client} task {task}: test count must be positive"
            )));
        }
        self.counts[client][task] = n;
        Ok(())
    }

    pub fn set(&mut self, client: usize, step: usize, task: usize, accuracy: f64) -> Result<()> {
        if task > step {
            return Err(Error::IncompleteMatrix(format!(
                "task {task} is not defined after step {step}"
            )));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::NumericInput("accuracy outside [0, 1]"));
        }
        self.acc[client][step][task] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, client: usize, step: usize, task: usize) -> Option<f64> {
        self.acc.get(client)?.get(step)?.get(task).copied().flatten()
    }

    pub fn count(&self, client: usize, task: usize) -> usize {
        self.counts[client][task]
    }

    /// The matrix restricted to steps `0..steps`.
    pub fn prefix(&self, steps: usize) -> Self {
        Self {
            acc: self.acc.iter().map(|c| c[..steps].to_vec()).collect(),
            counts: self.counts.iter().map(|c| c[..steps].to_vec()).collect(),
        }
    }

    fn entry(&self, k: usize, t: usize, i: usize) -> Result<(f64, f64)> {
        let a = self
            .get(k, t, i)
            .ok_or_else(|| Error::IncompleteMatrix(format!("client {k}: a[{t}][{i}] missing")))?;
        let n = self.counts[k][i];
        if n == 0 {
            return Err(Error::IncompleteMatrix(format!("client {k}: count of task {i} missing")));
        }
        Ok((a, n as f64))
    }
}

/// Sample-weighted mean of the final-step accuracies over all clients and tasks.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let tasks: Vec<usize> = (0..m.num_steps()).collect();
    evaluate_clean_subset(m, &tasks)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Forgetting {
    /// Peak minus final, negative when a task ends at its best.
    #[default]
    Signed,
    /// Each task's contribution floored at zero.
    Clamped,
}

/// Sample-weighted mean, over every task but the last, of the gap between
/// the best accuracy before the final step and the final accuracy.
pub fn average_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    forgetting_with(m, Forgetting::Signed)
}

pub fn forgetting_with(m: &AccuracyMatrix, mode: Forgetting) -> Result<f64> {
    let steps = m.num_steps();
    if steps < 2 {
        return Err(Error::IncompleteMatrix("forgetting needs at least two steps".into()));
    }
    let last = steps - 1;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..m.num_clients() {
        for i in 0..last {
            let (end, n) = m.entry(k, last, i)?;
            let mut peak = f64::NEG_INFINITY;
            for t in i..last {
                peak = peak.max(m.entry(k, t, i)?.0);
            }
            let gap = match mode {
                Forgetting::Signed => peak - end,
                Forgetting::Clamped => (peak - end).max(0.0),
            };
            num += gap * n;
            den += n;
        }
    }
    Ok(num / den)
}

/// `average_accuracy` over the listed (zero-based) tasks only.
pub fn evaluate_clean_subset(m: &AccuracyMatrix, tasks: &[usize]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::EmptyIndexSet);
    }
    let steps = m.num_steps();
    if steps == 0 || m.num_clients() == 0 {
        return Err(Error::IncompleteMatrix("matrix has no entries".into()));
    }
    let last = steps - 1;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..m.num_clients() {
        for &i in tasks {
            if i > last {
                return Err(Error::IncompleteMatrix(format!("task {i} beyond step {last}")));
            }
            let (a, n) = m.entry(k, last, i)?;
            num += a * n;
            den += n;
        }
    }
    Ok(num / den)
}
