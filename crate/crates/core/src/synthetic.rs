//! Seeded graph and dataset generators used by tests, fixtures and the
//! desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeData, Targets};

pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(n, &edges).expect("in-range edges")
}

/// Stochastic block model with a full block-pair probability matrix
/// (`probs[a][b]`, symmetric). Nodes are laid out block by block.
pub fn sbm_matrix(sizes: &[usize], probs: &[Vec<f64>], seed: u64) -> (Graph, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let n = blocks.len();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < probs[blocks[u]][blocks[v]] {
                edges.push((u, v));
            }
        }
    }
    (Graph::from_edges(n, &edges).expect("in-range edges"), blocks)
}

/// Planted-partition SBM: `p_in` inside blocks, `p_out` across.
pub fn sbm(sizes: &[usize], p_in: f64, p_out: f64, seed: u64) -> (Graph, Vec<usize>) {
    let k = sizes.len();
    let probs: Vec<Vec<f64>> = (0..k)
        .map(|a| (0..k).map(|b| if a == b { p_in } else { p_out }).collect())
        .collect();
    sbm_matrix(sizes, &probs, seed)
}

/// Two cliques of sizes `a` and `b` joined by a single edge between node
/// `a - 1` and node `a`.
pub fn bridge_of_cliques(a: usize, b: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..a {
        for v in u + 1..a {
            edges.push((u, v));
        }
    }
    for u in a..a + b {
        for v in u + 1..a + b {
            edges.push((u, v));
        }
    }
    if a > 0 && b > 0 {
        edges.push((a - 1, a));
    }
    Graph::from_edges(a + b, &edges).expect("in-range edges")
}

pub fn complete(n: usize) -> Graph {
    let edges: Vec<_> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
    Graph::from_edges(n, &edges).expect("in-range edges")
}

pub fn cycle(n: usize) -> Graph {
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    Graph::from_edges(n, &edges).expect("in-range edges")
}

/// `hubs` stars with `leaves` leaves each; consecutive hubs are linked in a
/// path so the graph is connected. Returns the graph and a role partition:
/// all hubs in group 0, leaves of hub `h` in group `h + 1`.
pub fn star_forest(hubs: usize, leaves: usize) -> (Graph, Vec<usize>) {
    let n = hubs * (leaves + 1);
    let mut edges = Vec::new();
    let mut role = vec![0; n];
    for h in 0..hubs {
        for l in 0..leaves {
            let leaf = hubs + h * leaves + l;
            edges.push((h, leaf));
            role[leaf] = h + 1;
        }
        if h + 1 < hubs {
            edges.push((h, h + 1));
        }
    }
    (Graph::from_edges(n, &edges).expect("in-range edges"), role)
}

/// Recipe for a node-classification dataset on an SBM where the label is
/// the block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmDatasetSpec {
    pub block_sizes: Vec<usize>,
    /// Block-pair edge probabilities; `probs[a][b]`.
    pub probs: Vec<Vec<f64>>,
    pub num_features: usize,
    /// Fraction of nodes whose feature signal points at a random block
    /// instead of their own.
    pub feature_noise: f64,
    /// Scale of the block signal relative to unit Gaussian noise.
    pub signal: f64,
    pub seed: u64,
}

impl SbmDatasetSpec {
    pub fn planted(blocks: usize, block_size: usize, p_in: f64, p_out: f64, seed: u64) -> Self {
        SbmDatasetSpec {
            block_sizes: vec![block_size; blocks],
            probs: (0..blocks)
                .map(|a| (0..blocks).map(|b| if a == b { p_in } else { p_out }).collect())
                .collect(),
            num_features: 16,
            feature_noise: 0.2,
            signal: 1.0,
            seed,
        }
    }
}

/// Generates graph and node data. Each block owns a random unit-norm
/// prototype direction; a node's features are `signal * prototype(b) +
/// N(0, I)` where `b` is its own block, or a uniformly random block for a
/// `feature_noise` fraction of nodes.
pub fn sbm_dataset(spec: &SbmDatasetSpec) -> (Graph, NodeData) {
    let (g, blocks) = sbm_matrix(&spec.block_sizes, &spec.probs, spec.seed);
    let k = spec.block_sizes.len();
    let f = spec.num_features;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut features = Vec::with_capacity(g.n() * f);
    for &b in &blocks {
        let src = if rng.random::<f64>() < spec.feature_noise {
            rng.random_range(0..k)
        } else {
            b
        };
        for p in &prototypes[src] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(spec.signal * p + noise);
        }
    }
    let data = NodeData {
        features,
        num_features: f,
        feature_names: (0..f).map(|i| format!("f{i}")).collect(),
        targets: Targets::Classes {
            labels: blocks,
            num_classes: k,
        },
        imputed: Vec::new(),
    };
    (g, data)
}
