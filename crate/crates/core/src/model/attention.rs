//! Masked multi-head attention over padded index tables.
//!
//! One kernel serves cluster attention, local attention and global
//! attention; only the tables differ. A table row `b` lists the query nodes
//! and key nodes of one attention group; `None` slots are padding. Scores
//! are `<q_i, k_j> / sqrt(d_h)` per head, softmax runs over the valid keys
//! of the row, and outputs are scattered back to the query nodes. Nodes
//! that appear in no query slot receive zeros.

use std::sync::Arc;

use crate::clustering::FilteredClustering;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{KeyMask, Tape, Var};

/// Dense layout of the retained clusters of one clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBatch {
    /// `num_clusters x max_cluster_size`, row-major; `None` is padding.
    pub index_table: Vec<Option<usize>>,
    pub mask: Vec<bool>,
    /// Node -> (row, slot), or `None` for unassigned nodes.
    pub membership_of: Vec<Option<(usize, usize)>>,
    pub num_clusters: usize,
    pub max_cluster_size: usize,
}

/// Rows follow cluster ids, slots follow ascending node id.
pub fn build_cluster_batch(fc: &FilteredClustering) -> Result<ClusterBatch> {
    let k = fc.num_clusters();
    if k == 0 {
        return Err(Error::Degenerate(
            "no clusters survive the size filter; cluster attention has nothing to attend".into(),
        ));
    }
    let width = fc.clusters().iter().map(Vec::len).max().unwrap_or(0);
    let mut index_table = vec![None; k * width];
    let mut membership_of = vec![None; fc.num_nodes()];
    for (row, members) in fc.clusters().iter().enumerate() {
        let mut sorted = members.clone();
        sorted.sort_unstable();
        for (slot, &v) in sorted.iter().enumerate() {
            index_table[row * width + slot] = Some(v);
            membership_of[v] = Some((row, slot));
        }
    }
    let mask = index_table.iter().map(Option::is_some).collect();
    Ok(ClusterBatch {
        index_table,
        mask,
        membership_of,
        num_clusters: k,
        max_cluster_size: width,
    })
}

/// Query and key index tables for one attention pattern.
#[derive(Debug, Clone)]
pub struct AttentionTables {
    pub groups: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub queries: Arc<Vec<Option<usize>>>,
    pub keys: Arc<Vec<Option<usize>>>,
    pub key_mask: KeyMask,
    pub num_nodes: usize,
}

impl AttentionTables {
    fn new(
        groups: usize,
        query_len: usize,
        key_len: usize,
        queries: Vec<Option<usize>>,
        keys: Vec<Option<usize>>,
        num_nodes: usize,
    ) -> Result<Self> {
        let mask: Vec<bool> = keys.iter().map(Option::is_some).collect();
        Ok(AttentionTables {
            groups,
            query_len,
            key_len,
            queries: Arc::new(queries),
            keys: Arc::new(keys),
            key_mask: KeyMask::new(mask, key_len)?,
            num_nodes,
        })
    }

    /// Every retained node attends to all members of its cluster.
    pub fn clusters(batch: &ClusterBatch) -> Result<Self> {
        Self::new(
            batch.num_clusters,
            batch.max_cluster_size,
            batch.max_cluster_size,
            batch.index_table.clone(),
            batch.index_table.clone(),
            batch.membership_of.len(),
        )
    }

    /// Node `i` attends to `N(i) ∪ {i}`.
    pub fn local(g: &Graph) -> Result<Self> {
        let n = g.n();
        let width = (0..n).map(|i| g.degree(i) + 1).max().unwrap_or(1);
        let mut keys = vec![None; n * width];
        for i in 0..n {
            let mut nb: Vec<usize> = g.neighbors(i).to_vec();
            nb.push(i);
            nb.sort_unstable();
            for (s, v) in nb.into_iter().enumerate() {
                keys[i * width + s] = Some(v);
            }
        }
        Self::new(n, 1, width, (0..n).map(Some).collect(), keys, n)
    }

    /// One group holding every node.
    pub fn global(n: usize) -> Result<Self> {
        let all: Vec<Option<usize>> = (0..n).map(Some).collect();
        Self::new(1, n, n, all.clone(), all, n)
    }
}

/// Projection parameters of one attention block, already bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

/// Output `[n, d]` and probabilities `[groups * heads, query_len, key_len]`.
pub fn attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    tables: &AttentionTables,
    heads: usize,
) -> Result<(Var, Var)> {
    let d = tape.shape(p.wq)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::InvalidParameter(format!(
            "hidden size {d} is not divisible by {heads} heads"
        )));
    }
    if tape.value(x).rows() != tables.num_nodes {
        return Err(Error::Shape {
            op: "attention",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![tables.num_nodes],
        });
    }
    let (b, lq, lk) = (tables.groups, tables.query_len, tables.key_len);
    let q = tape.linear(x, p.wq, p.bq)?;
    let k = tape.linear(x, p.wk, p.bk)?;
    let v = tape.linear(x, p.wv, p.bv)?;
    let q = tape.gather_rows(q, tables.queries.clone())?;
    let k = tape.gather_rows(k, tables.keys.clone())?;
    let v = tape.gather_rows(v, tables.keys.clone())?;
    let q = tape.split_heads(q, b, lq, heads)?;
    let k = tape.split_heads(k, b, lk, heads)?;
    let v = tape.split_heads(v, b, lk, heads)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    let probs = tape.masked_softmax(scores, &tables.key_mask)?;
    let out = tape.bmm(probs, v, false)?;
    let out = tape.merge_heads(out, b, lq, heads)?;
    let out = tape.scatter_rows(out, tables.queries.clone(), tables.num_nodes)?;
    Ok((out, probs))
}

/// Cluster attention for every clustering, concatenated in order:
/// `[n, d * |clusterings|]`.
pub fn clatt_forward(
    tape: &mut Tape,
    x: Var,
    tables: &[Arc<AttentionTables>],
    params: &[AttentionVars],
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    if tables.len() != params.len() || tables.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} cluster tables for {} parameter groups",
            tables.len(),
            params.len()
        )));
    }
    let mut outs = Vec::with_capacity(tables.len());
    let mut probs = Vec::with_capacity(tables.len());
    for (t, p) in tables.iter().zip(params) {
        let (o, pr) = attention(tape, x, p, t, heads)?;
        outs.push(o);
        probs.push(pr);
    }
    Ok((tape.concat_last(&outs)?, probs))
}

/// `linear(concat(mp, clatt), w, b)`.
pub fn fuse(tape: &mut Tape, mp: Var, clatt: Var, w: Var, b: Var) -> Result<Var> {
    let c = tape.concat_last(&[mp, clatt])?;
    tape.linear(c, w, b)
}

/// One attention edge: probability that `src` attends to `dst` in `head`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionEdge {
    pub head: usize,
    pub src: usize,
    pub dst: usize,
    pub prob: f64,
}

/// Reads attention probabilities back into `(head, src, dst, prob)`
/// triplets, skipping padding.
pub fn attention_edges(probs: &[f64], tables: &AttentionTables, heads: usize) -> Vec<AttentionEdge> {
    let (lq, lk) = (tables.query_len, tables.key_len);
    let mut edges = Vec::new();
    for b in 0..tables.groups {
        for h in 0..heads {
            for qi in 0..lq {
                let Some(src) = tables.queries[b * lq + qi] else {
                    continue;
                };
                let base = ((b * heads + h) * lq + qi) * lk;
                for ki in 0..lk {
                    if let Some(dst) = tables.keys[b * lk + ki] {
                        edges.push(AttentionEdge {
                            head: h,
                            src,
                            dst,
                            prob: probs[base + ki],
                        });
                    }
                }
            }
        }
    }
    edges
}
