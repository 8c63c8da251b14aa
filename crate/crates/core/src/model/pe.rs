//! Positional encodings: Laplacian eigenvectors and DeepWalk embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Largest component handled by the dense eigensolver.
pub const MAX_DENSE_EIGEN: usize = 6000;

#[derive(Debug, Clone)]
pub struct LaplacianPe {
    /// `n x k`; column `c` holds the `(c+1)`-th smallest nontrivial
    /// eigenvector of each node's component, zero where a component has
    /// fewer eigenvectors.
    pub pe: Tensor,
    /// Eigenvalues backing the columns, for the largest component.
    pub eigenvalues: Vec<f64>,
    /// More than one component; encodings were computed per component.
    pub disconnected: bool,
}

/// Eigenvectors of `I - D^-1/2 A D^-1/2` for the `k` smallest nontrivial
/// eigenvalues, signs fixed so each vector's largest-magnitude entry is
/// positive.
pub fn laplacian_pe(g: &Graph, k: usize) -> Result<LaplacianPe> {
    let n = g.n();
    if k >= n {
        return Err(Error::InvalidParameter(format!(
            "Laplacian encoding size {k} must be below the node count {n}"
        )));
    }
    let (labels, count) = g.connected_components();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (v, &c) in labels.iter().enumerate() {
        members[c].push(v);
    }
    let largest = (0..count)
        .max_by_key(|&c| (members[c].len(), std::cmp::Reverse(c)))
        .unwrap_or(0);
    let mut pe = Tensor::zeros(&[n, k]);
    let mut eigenvalues = Vec::new();
    for (c, nodes) in members.iter().enumerate() {
        let size = nodes.len();
        if size < 2 {
            continue;
        }
        if size > MAX_DENSE_EIGEN {
            return Err(Error::TooLarge(format!(
                "component of {size} nodes exceeds the dense eigensolver limit of {MAX_DENSE_EIGEN}"
            )));
        }
        let mut local = vec![usize::MAX; n];
        for (i, &v) in nodes.iter().enumerate() {
            local[v] = i;
        }
        let inv_sqrt: Vec<f64> = nodes.iter().map(|&v| 1.0 / (g.degree(v) as f64).sqrt()).collect();
        let mut lap = DMatrix::<f64>::identity(size, size);
        for (i, &v) in nodes.iter().enumerate() {
            for &u in g.neighbors(v) {
                let j = local[u];
                lap[(i, j)] -= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        let eig = SymmetricEigen::new(lap);
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
        for (col, &e) in order.iter().skip(1).take(k).enumerate() {
            let vec = eig.eigenvectors.column(e);
            let pivot = (0..size)
                .max_by(|&a, &b| vec[a].abs().total_cmp(&vec[b].abs()).then(b.cmp(&a)))
                .unwrap();
            let sign = if vec[pivot] < 0.0 { -1.0 } else { 1.0 };
            for (i, &v) in nodes.iter().enumerate() {
                pe.data_mut()[v * k + col] = sign * vec[i];
            }
            if c == largest {
                eigenvalues.push(eig.eigenvalues[e].clamp(0.0, 2.0));
            }
        }
    }
    Ok(LaplacianPe {
        pe,
        eigenvalues,
        disconnected: count > 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepWalkParams {
    pub dim: usize,
    pub walks_per_node: usize,
    pub walk_len: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DeepWalkParams {
    fn default() -> Self {
        DeepWalkParams {
            dim: 128,
            walks_per_node: 10,
            walk_len: 80,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skip-gram with negative sampling over uniform random walks. Single
/// threaded, so the result is a pure function of the parameters.
pub fn deepwalk_pe(g: &Graph, p: &DeepWalkParams) -> Result<Tensor> {
    let n = g.n();
    if n == 0 || p.dim == 0 || p.walk_len == 0 {
        return Err(Error::InvalidParameter(
            "DeepWalk needs nodes, dim > 0 and walk_len > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut walks: Vec<Vec<usize>> = Vec::with_capacity(n * p.walks_per_node);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..p.walks_per_node {
        order.shuffle(&mut rng);
        for &start in &order {
            let mut walk = vec![start];
            while walk.len() < p.walk_len {
                let nb = g.neighbors(*walk.last().unwrap());
                if nb.is_empty() {
                    break;
                }
                walk.push(nb[rng.random_range(0..nb.len())]);
            }
            walks.push(walk);
        }
    }
    // unigram^0.75 noise distribution
    let mut counts = vec![0.0f64; n];
    for w in &walks {
        for &v in w {
            counts[v] += 1.0;
        }
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for c in &counts {
        acc += c.powf(0.75);
        cumulative.push(acc);
    }
    let sample_noise = |rng: &mut ChaCha8Rng| {
        let x = rng.random::<f64>() * acc;
        cumulative.partition_point(|&c| c <= x).min(n - 1)
    };

    let d = p.dim;
    let mut emb: Vec<f64> = (0..n * d).map(|_| (rng.random::<f64>() - 0.5) / d as f64).collect();
    let mut ctx = vec![0.0f64; n * d];
    let tokens: usize = walks.iter().map(Vec::len).sum();
    let total = (tokens * p.epochs).max(1) as f64;
    let mut seen = 0usize;
    let mut grad = vec![0.0f64; d];
    for _ in 0..p.epochs {
        for walk in &walks {
            for (i, &center) in walk.iter().enumerate() {
                let lr = (p.lr * (1.0 - seen as f64 / total)).max(p.lr * 1e-4);
                seen += 1;
                let b = rng.random_range(1..=p.window.max(1));
                let lo = i.saturating_sub(b);
                let hi = (i + b).min(walk.len() - 1);
                for (j, &context) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|x| *x = 0.0);
                    let ce = center * d;
                    for t in 0..=p.negatives {
                        let (target, label) = if t == 0 {
                            (context, 1.0)
                        } else {
                            let s = sample_noise(&mut rng);
                            if s == context {
                                continue;
                            }
                            (s, 0.0)
                        };
                        let te = target * d;
                        let dot: f64 = (0..d).map(|k| emb[ce + k] * ctx[te + k]).sum();
                        let gscale = (label - sigmoid(dot)) * lr;
                        for k in 0..d {
                            grad[k] += gscale * ctx[te + k];
                            ctx[te + k] += gscale * emb[ce + k];
                        }
                    }
                    for k in 0..d {
                        emb[ce + k] += grad[k];
                    }
                }
            }
        }
    }
    Tensor::new(&[n, d], emb)
}
