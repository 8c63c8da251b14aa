//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AlgorithmTag, Clustering, ClusteringMeta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansParams {
    /// `None` picks `round(n / 128)` clamped to `[2, n]`.
    pub k: Option<usize>,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: None,
            seed: 0,
            max_iters: 100,
        }
    }
}

impl KMeansParams {
    pub fn resolve_k(&self, n: usize) -> usize {
        self.k
            .unwrap_or_else(|| ((n as f64 / 128.0).round() as usize).clamp(2.min(n), n))
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub clustering: Clustering,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment step. Non-increasing.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters the rows of a row-major `n x dim` matrix.
pub fn kmeans(points: &[f64], dim: usize, params: &KMeansParams) -> Result<KMeansResult> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Shape {
            op: "kmeans",
            lhs: vec![points.len()],
            rhs: vec![dim],
        });
    }
    let n = points.len() / dim;
    if n == 0 {
        return Err(Error::Empty("k-means needs at least one point".into()));
    }
    let k = params.resolve_k(n);
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("k = {k} must lie in 1..={n}")));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = vec![row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut x = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if x < d {
                    chosen = i;
                    break;
                }
                x -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(row(pick).to_vec());
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), centroids.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut history = Vec::new();
    for _ in 0..params.max_iters.max(1) {
        let mut changed = false;
        for i in 0..n {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, ctr)| (c, sq_dist(row(i), ctr)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            changed |= labels[i] != best;
            labels[i] = best;
            dists[i] = d;
        }
        history.push(dists.iter().sum());
        if !changed && history.len() > 1 {
            break;
        }
        // update step
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, x) in sums[labels[i]].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // an empty cluster takes the point farthest from its centroid, which
        // strictly lowers that point's cost and leaves others unchanged
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n).filter(|&i| counts[labels[i]] > 1).max_by(|&a, &b| {
                let da = sq_dist(row(a), &centroids[labels[a]]);
                let db = sq_dist(row(b), &centroids[labels[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            });
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                counts[c] = 1;
                labels[i] = c;
                centroids[c] = row(i).to_vec();
            }
        }
    }
    let inertia = *history.last().unwrap();
    let clustering = Clustering::from_assignment(&labels).with_meta(ClusteringMeta {
        algorithm: Some(AlgorithmTag::KM),
        params: serde_json::json!({ "k": k, "max_iters": params.max_iters }),
        seed: Some(params.seed),
        quality: Some(inertia),
    });
    Ok(KMeansResult {
        clustering,
        centroids,
        inertia,
        history,
    })
}
