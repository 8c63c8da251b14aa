use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, average_precision, r_squared, Metric};
use super::split::Split;
use crate::clustering::{AlgorithmTag, FilteredClustering};
use crate::error::{Error, Result};
use crate::graph::{FeatureTransform, Graph, NodeData, Targets, TaskKind};
use crate::model::{ConvType, GraphContext, Model, ModelSpec, PeKind};
use crate::tensor::{Adam, Tape, Tensor};

/// Everything a run reads besides its spec: the graph, node data,
/// positional encodings by kind and precomputed filtered clusterings.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub graph: Graph,
    pub data: NodeData,
    pub pes: Vec<(PeKind, Tensor)>,
    pub clusterings: Vec<(AlgorithmTag, FilteredClustering)>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, graph: Graph, data: NodeData) -> Result<Self> {
        if graph.n() != data.num_nodes() {
            return Err(Error::InvalidParameter(format!(
                "graph has {} nodes, node data has {}",
                graph.n(),
                data.num_nodes()
            )));
        }
        Ok(Dataset {
            name: name.into(),
            graph,
            data,
            pes: Vec::new(),
            clusterings: Vec::new(),
        })
    }

    pub fn metric(&self) -> Metric {
        Metric::for_task(self.data.task())
    }

    pub fn pe(&self, kind: PeKind) -> Option<&Tensor> {
        self.pes.iter().find(|(k, _)| *k == kind).map(|(_, t)| t)
    }

    /// Replaces or adds the positional encoding of `kind`.
    pub fn set_pe(&mut self, kind: PeKind, pe: Tensor) {
        match self.pes.iter_mut().find(|(k, _)| *k == kind) {
            Some(slot) => slot.1 = pe,
            None => self.pes.push((kind, pe)),
        }
    }

    pub fn clustering(&self, tag: AlgorithmTag) -> Option<&FilteredClustering> {
        self.clusterings.iter().find(|(t, _)| *t == tag).map(|(_, c)| c)
    }

    /// Replaces or adds the clustering stored under `tag`.
    pub fn set_clustering(&mut self, tag: AlgorithmTag, c: FilteredClustering) {
        match self.clusterings.iter_mut().find(|(t, _)| *t == tag) {
            Some(slot) => slot.1 = c,
            None => self.clusterings.push((tag, c)),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.data.task() {
            TaskKind::Multiclass => self.data.num_classes().unwrap_or(1),
            TaskKind::Binary | TaskKind::Regression => 1,
        }
    }

    /// Model inputs for `spec` with features passed through `transform`.
    pub fn context(&self, spec: &ModelSpec, transform: FeatureTransform) -> Result<GraphContext> {
        let data = self.data.transformed(transform);
        let n = data.num_nodes();
        let features = Tensor::new(&[n, data.num_features], data.features)?;
        let clusterings = spec
            .clusterings
            .iter()
            .map(|&tag| {
                self.clustering(tag)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("clustering {tag} was not computed for {}", self.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let clusterings = if spec.use_clatt { clusterings } else { Vec::new() };
        GraphContext::new(spec, &self.graph, features, self.pe(spec.pe).cloned(), &clusterings)
    }
}

/// Run options outside the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub eval_every: usize,
    pub feature_transform: FeatureTransform,
    /// Standard-scale regression targets with training-set statistics.
    pub scale_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            eval_every: 10,
            feature_transform: FeatureTransform::None,
            scale_targets: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation evaluation.
    pub model: Model,
    pub metric: Metric,
    pub best_step: usize,
    pub val: f64,
    pub test: f64,
    /// Training loss before each update.
    pub losses: Vec<f64>,
    pub history: Vec<EvalPoint>,
}

enum Objective {
    Classes(Arc<Vec<usize>>),
    Binary(Arc<Vec<f64>>),
    Regression { scaled: Arc<Vec<f64>>, mean: f64, std: f64 },
}

impl Objective {
    fn new(targets: &Targets, train: &[usize], scale: bool) -> Self {
        match targets {
            Targets::Classes { labels, num_classes } if *num_classes == 2 => {
                Objective::Binary(Arc::new(labels.iter().map(|&l| l as f64).collect()))
            }
            Targets::Classes { labels, .. } => Objective::Classes(Arc::new(labels.clone())),
            Targets::Regression(y) => {
                let (mut mean, mut std) = (0.0, 1.0);
                if scale && !train.is_empty() {
                    mean = train.iter().map(|&i| y[i]).sum::<f64>() / train.len() as f64;
                    let var = train.iter().map(|&i| (y[i] - mean).powi(2)).sum::<f64>() / train.len() as f64;
                    std = if var > 0.0 { var.sqrt() } else { 1.0 };
                }
                Objective::Regression {
                    scaled: Arc::new(y.iter().map(|v| (v - mean) / std).collect()),
                    mean,
                    std,
                }
            }
        }
    }

    fn loss(&self, tape: &mut Tape, out: crate::tensor::Var, rows: Arc<Vec<usize>>) -> Result<crate::tensor::Var> {
        match self {
            Objective::Classes(l) => tape.softmax_cross_entropy(out, l.clone(), rows),
            Objective::Binary(t) => tape.bce_with_logits(out, t.clone(), rows),
            Objective::Regression { scaled, .. } => tape.mse(out, scaled.clone(), rows),
        }
    }
}

/// Task metric of a model output on `rows`.
fn score(targets: &Targets, objective: &Objective, out: &Tensor, rows: &[usize]) -> Result<f64> {
    match (targets, objective) {
        (Targets::Classes { labels, .. }, Objective::Binary(_)) => {
            let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            average_precision(out.data(), &positive, rows)
        }
        (Targets::Classes { labels, .. }, _) => {
            let pred: Vec<usize> = (0..out.rows()).map(|i| argmax(out.row(i))).collect();
            accuracy(&pred, labels, rows)
        }
        (Targets::Regression(y), Objective::Regression { mean, std, .. }) => {
            let pred: Vec<f64> = out.data().iter().map(|v| v * std + mean).collect();
            r_squared(&pred, y, rows)
        }
        _ => Err(Error::Invariant("objective does not match the targets".into())),
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Full-batch Adam training. Evaluates at step 0 and every `eval_every`
/// steps; the returned model holds the parameters of the first evaluation
/// with the highest validation metric.
pub fn train(spec: &ModelSpec, cfg: &TrainConfig, ds: &Dataset, split: &Split, seed: u64) -> Result<TrainOutcome> {
    if split.num_nodes() != ds.graph.n() {
        return Err(Error::InvalidParameter(format!(
            "split covers {} nodes, dataset has {}",
            split.num_nodes(),
            ds.graph.n()
        )));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::InvalidParameter(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let eval_every = cfg.eval_every.max(1);
    let ctx = ds.context(spec, cfg.feature_transform)?;
    let pe_dim = ds.pe(spec.pe).map_or(0, Tensor::cols);
    let mut model = Model::new(spec, ds.data.num_features, ds.output_dim(), pe_dim, seed)?;
    let objective = Objective::new(&ds.data.targets, &split.train, cfg.scale_targets);
    let rows = Arc::new(split.train.clone());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1b5_4a32_d192_ed03);
    let mut adam = Adam::new(spec.lr);
    let metric = ds.metric();

    let evaluate = |model: &Model, step: usize| -> Result<EvalPoint> {
        let (out, _) = model.predict(&ctx)?;
        Ok(EvalPoint {
            step,
            train: score(&ds.data.targets, &objective, &out, &split.train)?,
            val: score(&ds.data.targets, &objective, &out, &split.val)?,
            test: if split.test.is_empty() {
                f64::NAN
            } else {
                score(&ds.data.targets, &objective, &out, &split.test)?
            },
        })
    };

    let first = evaluate(&model, 0)?;
    let mut best = (first.clone(), model.params().to_vec());
    let mut history = vec![first];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let rng = (spec.dropout > 0.0).then_some(&mut dropout_rng);
        let fwd = model.forward(&mut tape, &vars, &ctx, rng)?;
        let loss = objective.loss(&mut tape, fwd.output, rows.clone())?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        losses.push(value);
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .ok_or_else(|| Error::Autodiff("parameter gradient missing".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        adam.step(model.params_mut(), &grads)?;
        if step % eval_every == 0 || step == cfg.steps {
            let point = evaluate(&model, step)?;
            if point.val > best.0.val {
                best = (point.clone(), model.params().to_vec());
            }
            history.push(point);
        }
    }
    let (point, params) = best;
    model.params_mut().clone_from_slice(&params);
    Ok(TrainOutcome {
        model,
        metric,
        best_step: point.step,
        val: point.val,
        test: point.test,
        losses,
        history,
    })
}

/// Penultimate activations of a graph-agnostic residual MLP trained on the
/// task, for clustering nodes in representation space.
pub fn resmlp_representations(
    template: &ModelSpec,
    cfg: &TrainConfig,
    ds: &Dataset,
    split: &Split,
    seed: u64,
) -> Result<Tensor> {
    let spec = ModelSpec {
        conv: ConvType::ResMlp,
        use_clatt: false,
        clusterings: Vec::new(),
        pe: PeKind::None,
        ..template.clone()
    };
    let out = train(&spec, cfg, ds, split, seed)?;
    let ctx = ds.context(&spec, cfg.feature_transform)?;
    Ok(out.model.predict(&ctx)?.1)
}
