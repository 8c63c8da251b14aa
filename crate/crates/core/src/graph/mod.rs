//! Immutable undirected graphs in CSR form, file ingestion and structural
//! statistics.

mod io;
pub mod stats;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use io::{
    load_edge_list, load_node_table, write_edge_list, FeatureTransform, NodeData, NodeTableSchema, Targets, TaskKind,
};
pub use stats::{
    bfs_distances, clustering_coefficients, degree_assortativity, distance_stats, graph_stats, target_assortativity,
    unbiased_homophily, DistanceStats, GraphStats, StatsOptions,
};

/// Undirected simple graph stored as a symmetric CSR adjacency.
///
/// Neighbor lists are sorted, free of self-loops and duplicates. Node `i`
/// corresponds to `original_ids[i]` in the file it was loaded from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    original_ids: Vec<i64>,
}

impl Graph {
    /// Builds a graph over nodes `0..n` from an arbitrary edge list. Edges are
    /// symmetrized; self-loops and duplicates are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidParameter(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                continue;
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        Ok(Self::from_adjacency(adj, (0..n as i64).collect()))
    }

    fn from_adjacency(mut adj: Vec<Vec<usize>>, original_ids: Vec<i64>) -> Self {
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        for list in adj.iter_mut() {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Graph {
            offsets,
            neighbors,
            original_ids,
        }
    }

    /// Builds a graph from pairs of external ids. Ids are compacted to
    /// `0..n` in order of first appearance.
    pub fn from_labeled_edges(pairs: &[(i64, i64)]) -> Self {
        let mut index: HashMap<i64, usize> = HashMap::new();
        let mut original_ids = Vec::new();
        let mut compact = |id: i64, original_ids: &mut Vec<i64>| -> usize {
            *index.entry(id).or_insert_with(|| {
                original_ids.push(id);
                original_ids.len() - 1
            })
        };
        let mut edges = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            let u = compact(a, &mut original_ids);
            let v = compact(b, &mut original_ids);
            edges.push((u, v));
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); original_ids.len()];
        for (u, v) in edges {
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        Self::from_adjacency(adj, original_ids)
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn m(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn neighbor_array(&self) -> &[usize] {
        &self.neighbors
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.degree(i)).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn original_ids(&self) -> &[i64] {
        &self.original_ids
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| u < v)
                .map(move |v| (u, v))
        })
    }

    /// Graph density `2m / (n (n - 1))`.
    pub fn density(&self) -> f64 {
        let n = self.n() as f64;
        if n < 2.0 {
            return 0.0;
        }
        2.0 * self.m() as f64 / (n * (n - 1.0))
    }

    /// Connected component label per node and the component count. Labels
    /// are assigned in order of the smallest node id in each component.
    pub fn connected_components(&self) -> (Vec<usize>, usize) {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            label[s] = count;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &v in self.neighbors(u) {
                    if label[v] == usize::MAX {
                        label[v] = count;
                        stack.push(v);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    /// Subgraph induced by `nodes` (in the given order), keeping original ids.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Graph {
        let mut local = vec![usize::MAX; self.n()];
        for (i, &u) in nodes.iter().enumerate() {
            local[u] = i;
        }
        let adj = nodes
            .iter()
            .map(|&u| {
                self.neighbors(u)
                    .iter()
                    .filter_map(|&v| (local[v] != usize::MAX).then_some(local[v]))
                    .collect()
            })
            .collect();
        let ids = nodes.iter().map(|&u| self.original_ids[u]).collect();
        Self::from_adjacency(adj, ids)
    }

    /// Nodes of the largest connected component (ascending), plus the total
    /// number of components. Ties go to the component with the smaller label.
    pub fn largest_component(&self) -> (Vec<usize>, usize) {
        let (label, count) = self.connected_components();
        let mut sizes = vec![0usize; count];
        for &l in &label {
            sizes[l] += 1;
        }
        let best = (0..count).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)));
        match best {
            Some(c) => ((0..self.n()).filter(|&i| label[i] == c).collect(), count),
            None => (Vec::new(), 0),
        }
    }

    /// Applies a node relabeling: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.n();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut ids = vec![0; n];
        for u in 0..n {
            ids[perm[u]] = self.original_ids[u];
            adj[perm[u]] = self.neighbors(u).iter().map(|&v| perm[v]).collect();
        }
        Self::from_adjacency(adj, ids)
    }
}
