//! Splits, metrics, the training loop, hyperparameter search, clustering
//! selection and multi-seed experiments.

mod experiment;
mod grid;
mod metrics;
mod split;
mod trainer;

pub use experiment::{
    format_mean_std, run_experiment, run_experiment_with, select_clusterings, welch_t_test, Comparison,
    ExperimentReport, ModelSummary, Selection, Welch, ALPHA, VARIANCE_FLOOR,
};
pub use grid::{grid_search, Grid, GridResult, Trial};
pub use metrics::{accuracy, average_precision, r_squared, Metric};
pub use split::{make_split, Split};
pub use trainer::{resmlp_representations, train, Dataset, EvalPoint, TrainConfig, TrainOutcome};
