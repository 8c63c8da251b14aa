//! Pair-counting comparison of clusterings.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Clustering;
use crate::error::{Error, Result};

/// Counts over unordered node pairs: `n11` together in both, `n10` only in
/// the first, `n01` only in the second, `n00` in neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub n11: u128,
    pub n10: u128,
    pub n01: u128,
    pub n00: u128,
}

impl PairCounts {
    pub fn total(&self) -> u128 {
        self.n11 + self.n10 + self.n01 + self.n00
    }
}

fn pairs(x: u128) -> u128 {
    x * x.saturating_sub(1) / 2
}

/// Contingency-table pair counts in `O(n + cells)`.
pub fn pair_counts(a: &Clustering, b: &Clustering) -> Result<PairCounts> {
    if a.num_nodes() != b.num_nodes() {
        return Err(Error::InvalidParameter(format!(
            "clusterings cover {} and {} nodes",
            a.num_nodes(),
            b.num_nodes()
        )));
    }
    let mut cells: HashMap<(usize, usize), u128> = HashMap::new();
    for (&x, &y) in a.assignment().iter().zip(b.assignment()) {
        *cells.entry((x, y)).or_default() += 1;
    }
    let n11: u128 = cells.values().map(|&c| pairs(c)).sum();
    let same_a: u128 = a.sizes().iter().map(|&s| pairs(s as u128)).sum();
    let same_b: u128 = b.sizes().iter().map(|&s| pairs(s as u128)).sum();
    let total = pairs(a.num_nodes() as u128);
    Ok(PairCounts {
        n11,
        n10: same_a - n11,
        n01: same_b - n11,
        n00: total + n11 - same_a - same_b,
    })
}

/// Pearson correlation between the pair co-membership indicators of two
/// clusterings.
pub fn correlation_coefficient(a: &Clustering, b: &Clustering) -> Result<f64> {
    let p = pair_counts(a, b)?;
    let f = |x: u128| x as f64;
    // rows and columns of the 2x2 table; the product is symmetric in a, b
    let pa = f(p.n11 + p.n10) * f(p.n01 + p.n00);
    let pb = f(p.n11 + p.n01) * f(p.n10 + p.n00);
    let denom = (pa * pb).sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate(
            "degenerate clustering: all singletons or a single cluster".into(),
        ));
    }
    Ok((f(p.n11) * f(p.n00) - f(p.n10) * f(p.n01)) / denom)
}

/// Pairwise CC between named clusterings. Degenerate pairs hold `None`
/// with the reason in `notes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct PairEntry<'a> {
    a: &'a str,
    b: &'a str,
    cc: Option<f64>,
}

impl SimilarityMatrix {
    /// `{"names": [...], "pairs": [{"a", "b", "cc"}, ...], "notes": [...]}`
    /// over all ordered pairs.
    pub fn to_json(&self) -> serde_json::Value {
        let mut entries = Vec::new();
        for (i, a) in self.names.iter().enumerate() {
            for (j, b) in self.names.iter().enumerate() {
                entries.push(PairEntry {
                    a,
                    b,
                    cc: self.values[i][j],
                });
            }
        }
        serde_json::json!({
            "names": self.names,
            "pairs": entries,
            "notes": self.notes,
        })
    }

    /// Square table with a header row; empty cells are degenerate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clustering");
        for name in &self.names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.names.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    write!(out, "{v:.4}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn similarity_matrix(named: &[(String, Clustering)]) -> Result<SimilarityMatrix> {
    let k = named.len();
    let mut values = vec![vec![None; k]; k];
    let mut notes = Vec::new();
    for i in 0..k {
        for j in i..k {
            match correlation_coefficient(&named[i].1, &named[j].1) {
                Ok(cc) => {
                    values[i][j] = Some(cc);
                    values[j][i] = Some(cc);
                }
                Err(Error::Degenerate(reason)) => {
                    if i == j {
                        notes.push(format!("{}: {reason}", named[i].0));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(SimilarityMatrix {
        names: named.iter().map(|(n, _)| n.clone()).collect(),
        values,
        notes,
    })
}
