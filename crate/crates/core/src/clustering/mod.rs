//! Graph and feature clusterings, cluster-size filtering and clustering
//! similarity.

mod blockmodel;
mod kmeans;
mod leiden;
mod similarity;
mod weighted;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

pub use blockmodel::{
    hierarchical_fit, hierarchical_levels, planted_partition_fit, HierarchicalParams, Hierarchy, PlantedPartitionParams,
};
pub use kmeans::{kmeans, KMeansParams, KMeansResult};
pub use leiden::{cpm_quality, leiden_cpm, LeidenParams, LeidenResult};
pub use similarity::{correlation_coefficient, pair_counts, similarity_matrix, PairCounts, SimilarityMatrix};

/// The four clustering families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlgorithmTag {
    /// Leiden with the constant Potts model.
    LA,
    /// Planted-partition blockmodel.
    BPP,
    /// Coarsest non-trivial level of a hierarchical blockmodel.
    H1,
    /// k-means on learned node representations.
    KM,
}

impl AlgorithmTag {
    pub const ALL: [AlgorithmTag; 4] = [AlgorithmTag::LA, AlgorithmTag::BPP, AlgorithmTag::H1, AlgorithmTag::KM];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmTag::LA => "LA",
            AlgorithmTag::BPP => "BPP",
            AlgorithmTag::H1 => "H1",
            AlgorithmTag::KM => "KM",
        }
    }
}

impl fmt::Display for AlgorithmTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LA" => Ok(AlgorithmTag::LA),
            "BPP" => Ok(AlgorithmTag::BPP),
            "H1" => Ok(AlgorithmTag::H1),
            "KM" => Ok(AlgorithmTag::KM),
            _ => Err(Error::InvalidParameter(format!(
                "unknown clustering tag {s:?} (expected LA, BPP, H1 or KM)"
            ))),
        }
    }
}

/// Provenance of a clustering: which algorithm, with which parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ClusteringMeta {
    pub algorithm: Option<AlgorithmTag>,
    pub params: serde_json::Value,
    pub seed: Option<u64>,
    /// Objective value reached by the algorithm, when it has one.
    pub quality: Option<f64>,
}

/// A partition of nodes `0..n` into non-empty clusters with ids `0..k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    assignment: Vec<usize>,
    clusters: Vec<Vec<usize>>,
    pub meta: ClusteringMeta,
}

impl Clustering {
    /// Builds a clustering from arbitrary labels. Cluster ids are renumbered
    /// in order of first appearance.
    pub fn from_assignment(labels: &[usize]) -> Self {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut assignment = Vec::with_capacity(labels.len());
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for (node, &l) in labels.iter().enumerate() {
            let next = remap.len();
            let id = *remap.entry(l).or_insert(next);
            if id == clusters.len() {
                clusters.push(Vec::new());
            }
            clusters[id].push(node);
            assignment.push(id);
        }
        Clustering {
            assignment,
            clusters,
            meta: ClusteringMeta::default(),
        }
    }

    pub fn singletons(n: usize) -> Self {
        Self::from_assignment(&(0..n).collect::<Vec<_>>())
    }

    pub fn with_meta(mut self, meta: ClusteringMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn cluster_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    /// Checks the partition invariant.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.assignment.len()];
        for (c, members) in self.clusters.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Invariant(format!("cluster {c} is empty")));
            }
            for &v in members {
                if v >= seen.len() || seen[v] || self.assignment[v] != c {
                    return Err(Error::Invariant(format!("node {v} inconsistent in cluster {c}")));
                }
                seen[v] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invariant("some node is in no cluster".into()));
        }
        Ok(())
    }

    /// Same partition up to renaming cluster ids.
    pub fn same_partition(&self, other: &Clustering) -> bool {
        self.num_nodes() == other.num_nodes()
            && Clustering::from_assignment(&self.assignment).assignment
                == Clustering::from_assignment(&other.assignment).assignment
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Clustering {
        let mut labels = vec![0; self.num_nodes()];
        for (i, &c) in self.assignment.iter().enumerate() {
            labels[perm[i]] = c;
        }
        Clustering::from_assignment(&labels).with_meta(self.meta.clone())
    }

    /// Writes `node_id,cluster_id` rows using the graph's original ids, and a
    /// `<path>.meta.json` sidecar.
    pub fn write_csv(&self, graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if graph.n() != self.num_nodes() {
            return Err(Error::InvalidParameter(format!(
                "clustering has {} nodes, graph has {}",
                self.num_nodes(),
                graph.n()
            )));
        }
        let mut out = String::from("node_id,cluster_id\n");
        for (i, &c) in self.assignment.iter().enumerate() {
            out.push_str(&format!("{},{}\n", graph.original_ids()[i], c));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
        let meta_path = meta_path(path);
        let json = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
    }

    /// Reads a clustering CSV aligned to `graph`; the sidecar is optional.
    pub fn read_csv(graph: &Graph, path: impl AsRef<Path>) -> Result<Clustering> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: HashMap<i64, usize> = graph
            .original_ids()
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let mut labels = vec![usize::MAX; graph.n()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("expected node_id,cluster_id, got {line:?}")))?;
            let id: i64 = a.trim().parse().map_err(|_| bad(format!("bad node id {a:?}")))?;
            let c: usize = b.trim().parse().map_err(|_| bad(format!("bad cluster id {b:?}")))?;
            let node = *index.get(&id).ok_or_else(|| bad(format!("node {id} not in graph")))?;
            labels[node] = c;
        }
        if let Some(i) = labels.iter().position(|&l| l == usize::MAX) {
            return Err(Error::InvalidParameter(format!(
                "{}: node {} has no cluster",
                path.display(),
                graph.original_ids()[i]
            )));
        }
        let mut clustering = Clustering::from_assignment(&labels);
        let mp = meta_path(path);
        if let Ok(text) = fs::read_to_string(&mp) {
            clustering.meta = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: mp.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
        }
        Ok(clustering)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

/// A clustering after size filtering: clusters outside the size band are
/// dropped and their members marked unassigned.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredClustering {
    assignment: Vec<Option<usize>>,
    clusters: Vec<Vec<usize>>,
    unassigned: Vec<usize>,
    pub min_size: usize,
    pub max_size: usize,
}

impl FilteredClustering {
    pub fn num_nodes(&self) -> usize {
        self.assignment.len()
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }

    pub fn unassigned(&self) -> &[usize] {
        &self.unassigned
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Keeps every cluster, however small or large.
    pub fn unfiltered(c: &Clustering) -> Self {
        filter_clusters(c, 0, usize::MAX)
    }
}

/// Drops clusters whose size falls outside `[min_size, max_size]`.
/// Retained clusters keep their relative order and are renumbered `0..k`.
pub fn filter_clusters(c: &Clustering, min_size: usize, max_size: usize) -> FilteredClustering {
    let mut assignment = vec![None; c.num_nodes()];
    let mut clusters = Vec::new();
    let mut unassigned = Vec::new();
    for members in c.clusters() {
        if (min_size..=max_size).contains(&members.len()) {
            let id = clusters.len();
            for &v in members {
                assignment[v] = Some(id);
            }
            clusters.push(members.clone());
        } else {
            unassigned.extend_from_slice(members);
        }
    }
    unassigned.sort_unstable();
    FilteredClustering {
        assignment,
        clusters,
        unassigned,
        min_size,
        max_size,
    }
}

pub const DEFAULT_MIN_CLUSTER: usize = 4;
pub const DEFAULT_MAX_CLUSTER: usize = 512;
