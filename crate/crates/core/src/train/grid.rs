use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::split::Split;
use super::trainer::{train, Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::FeatureTransform;
use crate::model::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub lr: Vec<f64>,
    pub dropout: Vec<f64>,
    pub feature_transform: Vec<FeatureTransform>,
    pub scale_targets: Vec<bool>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            lr: vec![3e-5, 1e-4, 3e-4, 1e-3, 3e-3],
            dropout: vec![0.0, 0.1, 0.2],
            feature_transform: vec![FeatureTransform::None],
            scale_targets: vec![false],
        }
    }
}

impl Grid {
    pub fn singleton(spec: &ModelSpec, cfg: &TrainConfig) -> Self {
        Grid {
            lr: vec![spec.lr],
            dropout: vec![spec.dropout],
            feature_transform: vec![cfg.feature_transform],
            scale_targets: vec![cfg.scale_targets],
        }
    }

    pub fn len(&self) -> usize {
        self.lr.len() * self.dropout.len() * self.feature_transform.len() * self.scale_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every combination, ordered by the tie-break preference: lower lr,
    /// then lower dropout, then transform and target-scaling order.
    pub fn candidates(&self, spec: &ModelSpec, cfg: &TrainConfig) -> Vec<(ModelSpec, TrainConfig)> {
        let mut lr = self.lr.clone();
        lr.sort_by(f64::total_cmp);
        lr.dedup();
        let mut dropout = self.dropout.clone();
        dropout.sort_by(f64::total_cmp);
        dropout.dedup();
        let mut transforms = self.feature_transform.clone();
        transforms.sort_by_key(|t| *t as u8);
        transforms.dedup();
        let mut scaling = self.scale_targets.clone();
        scaling.sort();
        scaling.dedup();
        let mut out = Vec::new();
        for &l in &lr {
            for &d in &dropout {
                for &t in &transforms {
                    for &s in &scaling {
                        let spec = ModelSpec {
                            lr: l,
                            dropout: d,
                            ..spec.clone()
                        };
                        let cfg = TrainConfig {
                            feature_transform: t,
                            scale_targets: s,
                            ..cfg.clone()
                        };
                        out.push((spec, cfg));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trial {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub val: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

/// Trains every grid point with one seed and keeps the best validation
/// metric. Candidates run in parallel; the winner does not depend on the
/// order of the grid's value lists.
pub fn grid_search(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    grid: &Grid,
    ds: &Dataset,
    split: &Split,
    seed: u64,
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    let trials = grid
        .candidates(spec, cfg)
        .into_par_iter()
        .map(|(spec, config)| {
            let out = train(&spec, &config, ds, split, seed)?;
            Ok(Trial {
                spec,
                config,
                val: out.val,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.val > trials[best].val {
            best = i;
        }
    }
    Ok(GridResult {
        best: trials[best].clone(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvType;
    use crate::synthetic::{sbm_dataset, SbmDatasetSpec};
    use crate::train::make_split;

    fn setup() -> (Dataset, Split, ModelSpec, TrainConfig) {
        let mut s = SbmDatasetSpec::planted(2, 20, 0.3, 0.05, 3);
        s.signal = 3.0;
        let (g, d) = sbm_dataset(&s);
        let split = make_split(&d.targets, [0.5, 0.25, 0.25], 0, true).unwrap();
        let spec = ModelSpec {
            conv: ConvType::Gcn,
            hidden: 4,
            heads: 1,
            layers: 1,
            ..ModelSpec::default()
        };
        let cfg = TrainConfig {
            steps: 30,
            ..TrainConfig::default()
        };
        (Dataset::new("g", g, d).unwrap(), split, spec, cfg)
    }

    #[test]
    fn singleton_grid_returns_itself() {
        let (ds, split, spec, cfg) = setup();
        let r = grid_search(&spec, &cfg, &Grid::singleton(&spec, &cfg), &ds, &split, 0).unwrap();
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r.best.spec, spec);
        assert!(grid_search(
            &spec,
            &cfg,
            &Grid {
                lr: vec![],
                ..Grid::default()
            },
            &ds,
            &split,
            0
        )
        .is_err());
    }

    #[test]
    fn planted_winner_is_selected_regardless_of_order() {
        let (ds, split, spec, cfg) = setup();
        // With lr = 0 the model never improves on its initial validation score.
        let grid = Grid {
            lr: vec![0.0, 3e-2],
            dropout: vec![0.0],
            ..Grid::default()
        };
        let a = grid_search(&spec, &cfg, &grid, &ds, &split, 0).unwrap();
        assert_eq!(a.best.spec.lr, 3e-2);
        let reversed = Grid {
            lr: vec![3e-2, 0.0],
            ..grid
        };
        let b = grid_search(&spec, &cfg, &reversed, &ds, &split, 0).unwrap();
        assert_eq!(a.best.spec, b.best.spec);
    }

    #[test]
    fn ties_prefer_lower_lr_then_lower_dropout() {
        let (ds, split, spec, mut cfg) = setup();
        cfg.steps = 0;
        // Without training steps every candidate scores its initial model.
        let grid = Grid {
            lr: vec![1e-3, 1e-4],
            dropout: vec![0.2, 0.1],
            ..Grid::default()
        };
        let r = grid_search(&spec, &cfg, &grid, &ds, &split, 0).unwrap();
        assert_eq!((r.best.spec.lr, r.best.spec.dropout), (1e-4, 0.1));
    }
}
