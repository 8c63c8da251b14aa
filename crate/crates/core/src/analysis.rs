//! Attention-distance analysis and export helpers.
//!
//! For every node and attention head, the average graph distance to the
//! attended nodes weighted by attention probability. Full attention
//! matrices are only materialized here, never during training.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{similarity_matrix, AlgorithmTag, Clustering, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::graph::stats::UNREACHABLE;
use crate::graph::{bfs_distances, Graph};
use crate::model::{attention_edges, AttentionKind, GraphContext, Model, MAX_GLOBAL_NODES};
use crate::tensor::{Tape, Var};

pub const DEFAULT_QUANTILES: [f64; 5] = [0.05, 0.25, 0.50, 0.75, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionType {
    Local,
    Global,
    Cluster,
}

impl AttentionType {
    pub fn name(self) -> &'static str {
        match self {
            AttentionType::Local => "local",
            AttentionType::Global => "global",
            AttentionType::Cluster => "cluster",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub node: usize,
    pub layer: usize,
    pub head: usize,
    pub kind: AttentionType,
    pub clustering: Option<AlgorithmTag>,
    pub avg_distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub entries: Vec<ProfileEntry>,
    /// Attended (query, key, head) triples whose key is unreachable from
    /// the query; dropped with the remaining weights renormalized.
    pub unreachable: usize,
}

impl AttentionProfile {
    pub fn distances(&self, kind: AttentionType) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.avg_distance)
            .collect()
    }

    pub fn kinds(&self) -> Vec<AttentionType> {
        let mut k: Vec<AttentionType> = self.entries.iter().map(|e| e.kind).collect();
        k.sort();
        k.dedup();
        k
    }

    /// Columns `node,layer,head,kind,clustering,avg_distance`; nodes by
    /// their original id.
    pub fn to_csv(&self, g: &Graph) -> String {
        let ids = g.original_ids();
        let mut s = String::from("node,layer,head,kind,clustering,avg_distance\n");
        for e in &self.entries {
            let tag = e.clustering.map_or(String::new(), |t| t.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:?}",
                ids[e.node],
                e.layer,
                e.head,
                e.kind.name(),
                tag,
                e.avg_distance
            );
        }
        s
    }
}

/// One record's attention, indexed by query node: `(head, key, prob)`.
struct Rows {
    layer: usize,
    kind: AttentionType,
    clustering: Option<AlgorithmTag>,
    heads: usize,
    by_node: Vec<Vec<(usize, usize, f64)>>,
}

/// Runs `model` in evaluation mode on `ctx` and measures attention
/// distances in `g` with exact BFS. Cluster attention skips unassigned
/// nodes, since they attend to nothing.
pub fn attention_distance_profile(model: &Model, g: &Graph, ctx: &GraphContext) -> Result<AttentionProfile> {
    let n = g.n();
    if n > MAX_GLOBAL_NODES {
        return Err(Error::TooLarge(format!(
            "attention analysis over {n} nodes exceeds the limit of {MAX_GLOBAL_NODES}"
        )));
    }
    if ctx.num_nodes != n {
        return Err(Error::InvalidParameter(
            "graph and model inputs disagree on the node count".into(),
        ));
    }
    let heads = model.spec.heads;
    let mut tape = Tape::new();
    let vars: Vec<Var> = model.params().iter().map(|p| tape.constant(p.clone())).collect();
    let fwd = model.forward(&mut tape, &vars, ctx, None)?;
    let mut records = Vec::with_capacity(fwd.attention.len());
    for rec in &fwd.attention {
        let tables = ctx
            .tables(rec.kind)
            .ok_or_else(|| Error::Invariant("attention record without index tables".into()))?;
        let (kind, clustering) = match rec.kind {
            AttentionKind::Local => (AttentionType::Local, None),
            AttentionKind::Global => (AttentionType::Global, None),
            AttentionKind::Cluster(i) => (AttentionType::Cluster, model.spec.clusterings.get(i).copied()),
        };
        let mut by_node = vec![Vec::new(); n];
        for e in attention_edges(tape.value(rec.probs).data(), tables, heads) {
            by_node[e.src].push((e.head, e.dst, e.prob));
        }
        records.push(Rows {
            layer: rec.layer,
            kind,
            clustering,
            heads,
            by_node,
        });
    }
    if records.is_empty() {
        return Ok(AttentionProfile::default());
    }
    // per node: (entries in record/head order, unreachable count)
    let per_node: Vec<(Vec<Vec<f64>>, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dist = bfs_distances(g, i);
            let mut missing = 0;
            let per_record = records
                .iter()
                .map(|r| {
                    let row = &r.by_node[i];
                    if row.is_empty() {
                        return Vec::new();
                    }
                    let mut num = vec![0.0; r.heads];
                    let mut den = vec![0.0; r.heads];
                    for &(h, j, p) in row {
                        if dist[j] == UNREACHABLE {
                            missing += 1;
                        } else {
                            num[h] += p * dist[j] as f64;
                            den[h] += p;
                        }
                    }
                    num.iter()
                        .zip(&den)
                        .map(|(a, b)| if *b > 0.0 { a / b } else { 0.0 })
                        .collect()
                })
                .collect();
            (per_record, missing)
        })
        .collect();
    let mut profile = AttentionProfile {
        entries: Vec::new(),
        unreachable: per_node.iter().map(|p| p.1).sum(),
    };
    for (ri, r) in records.iter().enumerate() {
        for h in 0..r.heads {
            for (i, (vals, _)) in per_node.iter().enumerate() {
                if let Some(&d) = vals[ri].get(h) {
                    profile.entries.push(ProfileEntry {
                        node: i,
                        layer: r.layer,
                        head: h,
                        kind: r.kind,
                        clustering: r.clustering,
                        avg_distance: d,
                    });
                }
            }
        }
    }
    Ok(profile)
}

/// Linear-interpolation quantiles of `values` at each of `qs`.
pub fn quantiles(values: &[f64], qs: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("quantiles of an empty list".into()));
    }
    if let Some(q) = qs.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::InvalidParameter(format!("quantile {q} not in [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let last = v.len() - 1;
    Ok(qs
        .iter()
        .map(|&q| {
            let pos = q * last as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(last);
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if values.is_empty() || bins == 0 {
        return Err(Error::Empty("histogram needs values and at least one bin".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            left: lo + b as f64 * width,
            right: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        out[b].count += 1;
    }
    Ok(out)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bin_left,bin_right,count` rows.
pub fn export_histogram(values: &[f64], bins: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("bin_left,bin_right,count\n");
    for b in histogram(values, bins)? {
        let _ = writeln!(s, "{:?},{:?},{}", b.left, b.right, b.count);
    }
    write(path.as_ref(), &s)
}

/// Writes the pairwise correlation-coefficient matrix as CSV, with a JSON
/// sidecar (same stem, `.json`) listing cells and degenerate-pair notes.
pub fn export_similarity_matrix(named: &[(String, Clustering)], path: impl AsRef<Path>) -> Result<SimilarityMatrix> {
    if named.len() < 2 {
        return Err(Error::InvalidParameter(
            "a similarity matrix needs at least two clusterings".into(),
        ));
    }
    let m = similarity_matrix(named)?;
    let path = path.as_ref();
    write(path, &m.to_csv())?;
    let json = serde_json::to_string_pretty(&m.to_json()).map_err(|e| Error::Invariant(e.to_string()))?;
    write(&path.with_extension("json"), &json)?;
    Ok(m)
}

/// Quantile table with one row per label and one column per quantile.
pub fn quantile_table(rows: &[(String, Vec<f64>)], qs: &[f64]) -> Result<String> {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(10);
    let mut s = format!("{:<width$}", "quantile →");
    for q in qs {
        let _ = write!(s, "  {q:>5.2}");
    }
    s.push('\n');
    for (label, values) in rows {
        let _ = write!(s, "{label:<width$}");
        for v in quantiles(values, qs)? {
            let _ = write!(s, "  {v:>5.2}");
        }
        s.push('\n');
    }
    Ok(s)
}
