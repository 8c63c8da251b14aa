use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::metrics::Metric;
use super::split::Split;
use super::trainer::{train, Dataset, TrainConfig, TrainOutcome};
use crate::clustering::AlgorithmTag;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub baseline_val: f64,
    pub candidates: Vec<(AlgorithmTag, f64)>,
    /// Candidates beating the baseline, in canonical tag order.
    pub selected: Vec<AlgorithmTag>,
}

impl Selection {
    /// `base` with cluster attention over the selected clusterings, or
    /// unchanged without it when nothing was selected.
    pub fn apply(&self, base: &ModelSpec) -> ModelSpec {
        ModelSpec {
            use_clatt: !self.selected.is_empty(),
            clusterings: self.selected.clone(),
            ..base.clone()
        }
    }
}

/// Trains `base` without cluster attention, then once with each candidate
/// clustering alone, and keeps the candidates whose validation metric
/// strictly exceeds the baseline's.
pub fn select_clusterings(
    base: &ModelSpec,
    cfg: &TrainConfig,
    candidates: &[AlgorithmTag],
    ds: &Dataset,
    split: &Split,
    seed: u64,
) -> Result<Selection> {
    let mut tags = candidates.to_vec();
    tags.sort();
    tags.dedup();
    let mut specs = vec![ModelSpec {
        use_clatt: false,
        clusterings: Vec::new(),
        ..base.clone()
    }];
    specs.extend(tags.iter().map(|&t| ModelSpec {
        use_clatt: true,
        clusterings: vec![t],
        ..base.clone()
    }));
    let vals = specs
        .par_iter()
        .map(|s| train(s, cfg, ds, split, seed).map(|o| o.val))
        .collect::<Result<Vec<_>>>()?;
    let baseline_val = vals[0];
    let candidates: Vec<(AlgorithmTag, f64)> = tags.into_iter().zip(vals[1..].iter().copied()).collect();
    let selected = candidates
        .iter()
        .filter(|(_, v)| *v > baseline_val)
        .map(|(t, _)| *t)
        .collect();
    Ok(Selection {
        baseline_val,
        candidates,
        selected,
    })
}

/// Result of a two-sided Welch t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Welch {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Sample variances below this floor are raised to it, so samples with no
/// spread still yield a finite statistic.
pub const VARIANCE_FLOOR: f64 = 1e-12;

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<Welch> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidParameter(
            "Welch test needs at least two values per sample".into(),
        ));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va.max(VARIANCE_FLOOR) / na, vb.max(VARIANCE_FLOOR) / nb);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Invariant(format!("t distribution: {e}")))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(Welch { t, df, p_value })
}

/// Mean and unbiased sample variance.
fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub label: String,
    pub spec: ModelSpec,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub base: usize,
    pub clatt: usize,
    pub test: Welch,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub metric: Metric,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelSummary>,
    pub comparisons: Vec<Comparison>,
}

pub const ALPHA: f64 = 0.05;

fn same_base(a: &ModelSpec, b: &ModelSpec) -> bool {
    a.conv == b.conv
        && a.pe == b.pe
        && a.pe_dim == b.pe_dim
        && a.layers == b.layers
        && a.hidden == b.hidden
        && a.heads == b.heads
}

/// Trains every model once per seed on a fixed split and tests each
/// cluster-attention model against the matching base model.
pub fn run_experiment(
    ds: &Dataset,
    models: &[(ModelSpec, TrainConfig)],
    split: &Split,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    run_experiment_with(ds, models, split, seeds, |_, _, _| Ok(()))
}

/// [`run_experiment`] that hands every finished run (model index, seed,
/// outcome) to `on_run`, e.g. to save checkpoints.
pub fn run_experiment_with<F>(
    ds: &Dataset,
    models: &[(ModelSpec, TrainConfig)],
    split: &Split,
    seeds: &[u64],
    on_run: F,
) -> Result<ExperimentReport>
where
    F: Fn(usize, u64, &TrainOutcome) -> Result<()> + Sync,
{
    if seeds.len() < 2 {
        return Err(Error::Config("an experiment needs at least two seeds".into()));
    }
    if models.is_empty() {
        return Err(Error::Config("no models to run".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..models.len())
        .flat_map(|m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(m, s)| {
            let out = train(&models[m].0, &models[m].1, ds, split, s)?;
            on_run(m, s, &out)?;
            Ok(out.test)
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries: Vec<ModelSummary> = models
        .iter()
        .enumerate()
        .map(|(m, (spec, _))| {
            let values = results[m * seeds.len()..(m + 1) * seeds.len()].to_vec();
            let (mean, var) = mean_var(&values);
            ModelSummary {
                label: spec.label(),
                spec: spec.clone(),
                values,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    let mut comparisons = Vec::new();
    for (c, s) in summaries.iter().enumerate().filter(|(_, s)| s.spec.use_clatt) {
        if let Some(b) = summaries
            .iter()
            .position(|b| !b.spec.use_clatt && same_base(&b.spec, &s.spec))
        {
            let test = welch_t_test(&s.values, &summaries[b].values)?;
            comparisons.push(Comparison {
                base: b,
                clatt: c,
                significant: test.p_value < ALPHA,
                test,
            });
        }
    }
    Ok(ExperimentReport {
        dataset: ds.name.clone(),
        metric: ds.metric(),
        seeds: seeds.to_vec(),
        models: summaries,
        comparisons,
    })
}

/// `59.05 ± 0.16`: mean and deviation as percentages with two decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

impl ExperimentReport {
    fn significance(&self, m: usize) -> Option<bool> {
        self.comparisons.iter().find(|c| c.clatt == m).map(|c| c.significant)
    }

    /// Columns `model,metric,mean,std,significant`; the last is empty for
    /// models without a base to compare against.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,metric,mean,std,significant\n");
        for (i, m) in self.models.iter().enumerate() {
            let sig = self.significance(i).map_or(String::new(), |b| b.to_string());
            let _ = writeln!(s, "{},{},{:?},{:?},{}", m.label, self.metric.name(), m.mean, m.std, sig);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.models.iter().map(|m| m.label.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{} ({}, {} seeds)\n",
            self.dataset,
            self.metric.name(),
            self.seeds.len()
        );
        for (i, m) in self.models.iter().enumerate() {
            let mark = match self.significance(i) {
                Some(true) => "  *",
                _ => "",
            };
            let _ = writeln!(s, "{:<width$}  {}{}", m.label, format_mean_std(m.mean, m.std), mark);
        }
        if self.comparisons.iter().any(|c| c.significant) {
            let _ = writeln!(s, "* two-sided Welch t-test against the base model, p < {ALPHA}");
        }
        s
    }
}
