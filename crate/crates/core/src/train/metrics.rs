use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    AveragePrecision,
    R2,
}

impl Metric {
    pub fn for_task(task: TaskKind) -> Metric {
        match task {
            TaskKind::Multiclass => Metric::Accuracy,
            TaskKind::Binary => Metric::AveragePrecision,
            TaskKind::Regression => Metric::R2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::AveragePrecision => "average_precision",
            Metric::R2 => "r2",
        }
    }
}

fn non_empty(mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        Err(Error::Empty("metric over an empty node set".into()))
    } else {
        Ok(())
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize], mask: &[usize]) -> Result<f64> {
    non_empty(mask)?;
    let hits = mask.iter().filter(|&&i| pred[i] == labels[i]).count();
    Ok(hits as f64 / mask.len() as f64)
}

/// Mean of precision at the rank of each positive. Ranking is by score
/// descending, ties by node index ascending.
pub fn average_precision(scores: &[f64], positive: &[bool], mask: &[usize]) -> Result<f64> {
    non_empty(mask)?;
    let mut order = mask.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Degenerate(
            "average precision needs at least one positive".into(),
        ));
    }
    Ok(sum / hits as f64)
}

pub fn r_squared(pred: &[f64], targets: &[f64], mask: &[usize]) -> Result<f64> {
    non_empty(mask)?;
    let mean = mask.iter().map(|&i| targets[i]).sum::<f64>() / mask.len() as f64;
    let ss_tot: f64 = mask.iter().map(|&i| (targets[i] - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("R² undefined for constant targets".into()));
    }
    let ss_res: f64 = mask.iter().map(|&i| (targets[i] - pred[i]).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}
