//! Structural statistics: distances, clustering coefficients, assortativity
//! and homophily.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Graph, NodeData, Targets};
use crate::error::{Error, Result};

/// Distance value for nodes not reachable from the BFS source.
pub const UNREACHABLE: usize = usize::MAX;

/// Exact unweighted shortest-path distances from `source`.
pub fn bfs_distances(g: &Graph, source: usize) -> Vec<usize> {
    let mut dist = vec![UNREACHABLE; g.n()];
    let mut queue = VecDeque::new();
    bfs_into(g, source, &mut dist, &mut queue);
    dist
}

fn bfs_into(g: &Graph, source: usize, dist: &mut [usize], queue: &mut VecDeque<usize>) {
    dist.fill(UNREACHABLE);
    queue.clear();
    dist[source] = 0;
    queue.push_back(source);
    while let Some(u) = queue.pop_front() {
        let du = dist[u] + 1;
        for &v in g.neighbors(u) {
            if dist[v] == UNREACHABLE {
                dist[v] = du;
                queue.push_back(v);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsOptions {
    /// All-pairs BFS is used up to this many nodes in the largest component.
    pub exact_threshold: usize,
    pub sample_sources: usize,
    pub seed: u64,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            exact_threshold: 20_000,
            sample_sources: 1_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub avg_distance: f64,
    pub diameter: usize,
    /// False when sampling was used; the diameter is then a lower bound.
    pub exact: bool,
    pub components: usize,
    /// Fraction of nodes that lie in the largest component.
    pub coverage: f64,
}

/// Average shortest-path distance and diameter of the largest connected
/// component.
pub fn distance_stats(g: &Graph, opts: &StatsOptions) -> Result<DistanceStats> {
    if g.n() == 0 {
        return Err(Error::Empty("graph has no nodes".into()));
    }
    let (nodes, components) = g.largest_component();
    let coverage = nodes.len() as f64 / g.n() as f64;
    let lcc = g.induced_subgraph(&nodes);
    let n = lcc.n();
    if n == 1 {
        return Ok(DistanceStats {
            avg_distance: 0.0,
            diameter: 0,
            exact: true,
            components,
            coverage,
        });
    }

    if n <= opts.exact_threshold {
        let (sum, max) = (0..n)
            .into_par_iter()
            .fold(
                || (vec![0usize; n], VecDeque::new(), 0u64, 0usize),
                |(mut dist, mut queue, sum, max), s| {
                    bfs_into(&lcc, s, &mut dist, &mut queue);
                    let (ds, dm) = dist.iter().fold((0u64, 0usize), |(a, b), &d| (a + d as u64, b.max(d)));
                    (dist, queue, sum + ds, max.max(dm))
                },
            )
            .map(|(_, _, s, m)| (s, m))
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1.max(b.1)));
        let pairs = (n as f64) * (n as f64 - 1.0);
        return Ok(DistanceStats {
            avg_distance: sum as f64 / pairs,
            diameter: max,
            exact: true,
            components,
            coverage,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let sources = &order[..opts.sample_sources.clamp(1, n)];
    let (sum, max) = sources
        .par_iter()
        .map(|&s| {
            let d = bfs_distances(&lcc, s);
            d.iter().fold((0u64, 0usize), |(a, b), &x| (a + x as u64, b.max(x)))
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1.max(b.1)));
    let avg = sum as f64 / (sources.len() as f64 * (n as f64 - 1.0));

    // iterated farthest-point sweeps for a diameter lower bound
    let mut diameter = max;
    let mut start = sources[0];
    for _ in 0..10 {
        let d = bfs_distances(&lcc, start);
        let (far, &ecc) = d
            .iter()
            .enumerate()
            .max_by_key(|&(i, &x)| (x, std::cmp::Reverse(i)))
            .unwrap();
        if ecc <= diameter && far == start {
            break;
        }
        diameter = diameter.max(ecc);
        start = far;
    }
    Ok(DistanceStats {
        avg_distance: avg,
        diameter,
        exact: false,
        components,
        coverage,
    })
}

/// Per-node triangle counts.
pub fn triangle_counts(g: &Graph) -> Vec<u64> {
    let n = g.n();
    let mut t = vec![0u64; n];
    for u in 0..n {
        let nu = g.neighbors(u);
        for &v in nu.iter().filter(|&&v| v > u) {
            let nv = g.neighbors(v);
            // count w > v in N(u) ∩ N(v)
            let (mut i, mut j) = (nu.partition_point(|&x| x <= v), nv.partition_point(|&x| x <= v));
            while i < nu.len() && j < nv.len() {
                match nu[i].cmp(&nv[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        let w = nu[i];
                        t[u] += 1;
                        t[v] += 1;
                        t[w] += 1;
                        i += 1;
                        j += 1;
                    }
                }
            }
        }
    }
    t
}

/// `(global, average local)` clustering coefficients. Nodes of degree < 2
/// contribute 0 to the local average.
pub fn clustering_coefficients(g: &Graph) -> (f64, f64) {
    let n = g.n();
    if n == 0 {
        return (0.0, 0.0);
    }
    let t = triangle_counts(g);
    let mut closed = 0.0;
    let mut wedges = 0.0;
    let mut local_sum = 0.0;
    for i in 0..n {
        let d = g.degree(i) as f64;
        let w = d * (d - 1.0) / 2.0;
        closed += t[i] as f64;
        wedges += w;
        if w > 0.0 {
            local_sum += t[i] as f64 / w;
        }
    }
    let global = if wedges > 0.0 { closed / wedges } else { 0.0 };
    (global, local_sum / n as f64)
}

/// Pearson correlation of `value` over ordered endpoint pairs of every edge.
/// Returns NaN when either side has zero variance or there are no edges.
fn edge_pearson(g: &Graph, value: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut count = 0.0;
    for u in 0..g.n() {
        for &v in g.neighbors(u) {
            let (x, y) = (value[u], value[v]);
            s += x;
            sxx += x * x;
            sxy += x * y;
            count += 1.0;
        }
    }
    if count == 0.0 {
        return f64::NAN;
    }
    // both marginals are the same multiset since every edge appears twice
    let mean = s / count;
    let var = sxx / count - mean * mean;
    if var <= 1e-12 * (sxx / count).abs().max(1.0) {
        return f64::NAN;
    }
    ((sxy / count - mean * mean) / var).clamp(-1.0, 1.0)
}

/// Degree assortativity; NaN for regular or edgeless graphs.
pub fn degree_assortativity(g: &Graph) -> f64 {
    let deg: Vec<f64> = (0..g.n()).map(|i| g.degree(i) as f64).collect();
    edge_pearson(g, &deg)
}

/// Target assortativity; NaN when targets are constant over edge endpoints.
pub fn target_assortativity(g: &Graph, targets: &[f64]) -> Result<f64> {
    if targets.len() != g.n() {
        return Err(Error::InvalidParameter(format!(
            "{} targets for {} nodes",
            targets.len(),
            g.n()
        )));
    }
    Ok(edge_pearson(g, targets))
}

/// Unbiased homophily with `alpha = 0`.
///
/// With `c[a][b]` the number of ordered edge endpoints `(u, v)` with
/// `label(u) = a`, `label(v) = b`:
///
/// `h = sum_{a<b} (sqrt(c_aa c_bb) - c_ab) / sum_{a<b} (sqrt(c_aa c_bb) + c_ab)`
///
/// It is 1 when no edge crosses classes, -1 when no edge stays inside a class,
/// and close to 0 when labels are independent of structure, whatever the
/// class sizes.
pub fn unbiased_homophily(g: &Graph, labels: &[usize]) -> Result<f64> {
    if labels.len() != g.n() {
        return Err(Error::InvalidParameter(format!(
            "{} labels for {} nodes",
            labels.len(),
            g.n()
        )));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; k];
    for &l in labels {
        present[l] = true;
    }
    let classes: Vec<usize> = (0..k).filter(|&c| present[c]).collect();
    if classes.len() < 2 {
        return Err(Error::Degenerate("unbiased homophily needs at least 2 classes".into()));
    }
    let mut c = vec![0.0f64; k * k];
    for u in 0..g.n() {
        for &v in g.neighbors(u) {
            c[labels[u] * k + labels[v]] += 1.0;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (ai, &a) in classes.iter().enumerate() {
        for &b in &classes[ai + 1..] {
            let geo = (c[a * k + a] * c[b * k + b]).sqrt();
            let cross = c[a * k + b];
            num += geo - cross;
            den += geo + cross;
        }
    }
    if den == 0.0 {
        return Err(Error::Degenerate(
            "no edges touch two distinct classes or their interiors".into(),
        ));
    }
    Ok(num / den)
}

/// All statistics reported for a dataset. Computed on the largest connected
/// component; undefined values serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub components: usize,
    pub lcc_coverage: f64,
    pub avg_degree: f64,
    pub median_degree: usize,
    pub avg_distance: f64,
    pub diameter: usize,
    pub diameter_is_lower_bound: bool,
    pub global_clustering: f64,
    pub avg_local_clustering: f64,
    pub degree_assortativity: Option<f64>,
    pub num_classes: Option<usize>,
    pub unbiased_homophily: Option<f64>,
    pub target_assortativity: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

pub fn graph_stats(g: &Graph, data: Option<&NodeData>, opts: &StatsOptions) -> Result<GraphStats> {
    if g.n() == 0 {
        return Err(Error::Empty("graph has no nodes".into()));
    }
    let (nodes, _) = g.largest_component();
    let lcc = g.induced_subgraph(&nodes);
    let dist = distance_stats(g, opts)?;
    let mut degrees = lcc.degrees();
    degrees.sort_unstable();
    let median_degree = degrees[(degrees.len() - 1) / 2];
    let avg_degree = 2.0 * lcc.m() as f64 / lcc.n() as f64;
    let (global_clustering, avg_local_clustering) = clustering_coefficients(&lcc);

    let mut num_classes = None;
    let mut homophily = None;
    let mut target_assort = None;
    if let Some(data) = data {
        if data.num_nodes() != g.n() {
            return Err(Error::NodeTable(format!(
                "node data has {} rows, graph has {} nodes",
                data.num_nodes(),
                g.n()
            )));
        }
        match &data.targets {
            Targets::Classes { labels, num_classes: k } => {
                num_classes = Some(*k);
                let sub: Vec<usize> = nodes.iter().map(|&i| labels[i]).collect();
                homophily = unbiased_homophily(&lcc, &sub).ok();
            }
            Targets::Regression(t) => {
                let sub: Vec<f64> = nodes.iter().map(|&i| t[i]).collect();
                target_assort = finite(target_assortativity(&lcc, &sub)?);
            }
        }
    }

    Ok(GraphStats {
        num_nodes: g.n(),
        num_edges: g.m(),
        components: dist.components,
        lcc_coverage: dist.coverage,
        avg_degree,
        median_degree,
        avg_distance: dist.avg_distance,
        diameter: dist.diameter,
        diameter_is_lower_bound: !dist.exact,
        global_clustering,
        avg_local_clustering,
        degree_assortativity: finite(degree_assortativity(&lcc)),
        num_classes,
        unbiased_homophily: homophily,
        target_assortativity: target_assort,
    })
}
