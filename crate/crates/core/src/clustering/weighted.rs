//! Weighted graphs of super-nodes shared by the aggregation-based
//! clustering algorithms.

use crate::graph::Graph;

/// Weighted graph of super-nodes. `self_w` holds internal edge weight,
/// `size` the number of original nodes represented.
pub(crate) struct WeightedGraph {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
    pub self_w: Vec<f64>,
    pub size: Vec<f64>,
}

impl WeightedGraph {
    pub fn from_graph(g: &Graph) -> Self {
        WeightedGraph {
            offsets: g.offsets().to_vec(),
            targets: g.neighbor_array().to_vec(),
            weights: vec![1.0; g.neighbor_array().len()],
            self_w: vec![0.0; g.n()],
            size: vec![1.0; g.n()],
        }
    }

    pub fn n(&self) -> usize {
        self.size.len()
    }

    pub fn adj(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[v]..self.offsets[v + 1];
        self.targets[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    /// Collapses `labels` (contiguous ids) into a new level graph.
    pub fn aggregate(&self, labels: &[usize], k: usize) -> WeightedGraph {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (v, &l) in labels.iter().enumerate() {
            members[l].push(v);
        }
        let mut offsets = vec![0];
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        let mut self_w = vec![0.0; k];
        let mut size = vec![0.0; k];
        let mut acc = vec![0.0f64; k];
        let mut touched = Vec::new();
        for (r, mem) in members.iter().enumerate() {
            let mut internal2 = 0.0;
            for &v in mem {
                size[r] += self.size[v];
                self_w[r] += self.self_w[v];
                for (u, w) in self.adj(v) {
                    let t = labels[u];
                    if t == r {
                        internal2 += w;
                    } else {
                        if acc[t] == 0.0 {
                            touched.push(t);
                        }
                        acc[t] += w;
                    }
                }
            }
            self_w[r] += internal2 / 2.0;
            touched.sort_unstable();
            for &t in &touched {
                targets.push(t);
                weights.push(acc[t]);
                acc[t] = 0.0;
            }
            touched.clear();
            offsets.push(targets.len());
        }
        WeightedGraph {
            offsets,
            targets,
            weights,
            self_w,
            size,
        }
    }
}

/// Renumbers labels to `0..k` in order of first appearance; returns `k`.
pub(crate) fn renumber(labels: &mut [usize]) -> usize {
    let mut map = vec![usize::MAX; labels.len().max(labels.iter().max().map_or(0, |m| m + 1))];
    let mut next = 0;
    for l in labels.iter_mut() {
        if map[*l] == usize::MAX {
            map[*l] = next;
            next += 1;
        }
        *l = map[*l];
    }
    next
}
