use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::Graph;
use crate::error::{Error, Result};

/// Reads an edge list: one edge per line, two integer ids separated by
/// whitespace and/or a comma. Lines starting with `#` and blank lines are
/// skipped; a non-numeric first data line is treated as a header.
///
/// The result is always undirected; `directed` only records that the input
/// listed each edge once per direction of interest and changes nothing about
/// the symmetrization.
pub fn load_edge_list(path: impl AsRef<Path>, directed: bool) -> Result<Graph> {
    let _ = directed;
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut seen_data = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let parsed = if fields.len() >= 2 {
            match (fields[0].parse::<i64>(), fields[1].parse::<i64>()) {
                (Ok(a), Ok(b)) => Some((a, b)),
                _ => None,
            }
        } else {
            None
        };
        match parsed {
            Some(p) if fields.len() == 2 => {
                pairs.push(p);
                seen_data = true;
            }
            None if !seen_data && fields.len() == 2 && fields.iter().all(|f| f.parse::<f64>().is_err()) => {
                // header row
                seen_data = true;
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected two integer node ids, got {line:?}"),
                })
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty(format!("no edges in {}", path.display())));
    }
    Ok(Graph::from_labeled_edges(&pairs))
}

/// Writes each undirected edge once using the original node ids.
pub fn write_edge_list(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let ids = g.original_ids();
    for (u, v) in g.edges() {
        out.push_str(&format!("{} {}\n", ids[u], ids[v]));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTransform {
    #[default]
    None,
    StandardScale,
    QuantileNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Multiclass,
    Binary,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Regression(Vec<f64>),
}

impl Targets {
    pub fn task(&self) -> TaskKind {
        match self {
            Targets::Classes { num_classes, .. } if *num_classes == 2 => TaskKind::Binary,
            Targets::Classes { .. } => TaskKind::Multiclass,
            Targets::Regression(_) => TaskKind::Regression,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Regression(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Regression(_) => None,
        }
    }

    /// Targets as reals (class ids cast to f64).
    pub fn as_reals(&self) -> Vec<f64> {
        match self {
            Targets::Classes { labels, .. } => labels.iter().map(|&l| l as f64).collect(),
            Targets::Regression(v) => v.clone(),
        }
    }
}

/// Node features (row-major `n x num_features`) and targets, aligned to the
/// graph's node order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeData {
    pub features: Vec<f64>,
    pub num_features: usize,
    pub feature_names: Vec<String>,
    pub targets: Targets,
    /// `(node, column)` cells that were missing and imputed with the column mean.
    pub imputed: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeTableSchema {
    #[serde(default = "default_id_column")]
    pub id_column: String,
    /// Feature columns; `None` means every column except id and target.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
    pub target_column: String,
    pub task: TaskKind,
}

fn default_id_column() -> String {
    "id".to_string()
}

impl NodeData {
    pub fn num_nodes(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn task(&self) -> TaskKind {
        self.targets.task()
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Regression(_) => None,
        }
    }

    /// Returns a copy with every feature column transformed.
    pub fn transformed(&self, transform: FeatureTransform) -> NodeData {
        let mut out = self.clone();
        let n = self.num_nodes();
        let f = self.num_features;
        if n == 0 || transform == FeatureTransform::None {
            return out;
        }
        for c in 0..f {
            let col: Vec<f64> = (0..n).map(|i| self.features[i * f + c]).collect();
            let mapped = match transform {
                FeatureTransform::None => col,
                FeatureTransform::StandardScale => standard_scale(&col),
                FeatureTransform::QuantileNormal => quantile_normal(&col),
            };
            for (i, v) in mapped.into_iter().enumerate() {
                out.features[i * f + c] = v;
            }
        }
        out
    }

    /// Permutes node rows: row `i` moves to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> NodeData {
        let n = self.num_nodes();
        let f = self.num_features;
        let mut features = vec![0.0; n * f];
        for i in 0..n {
            features[perm[i] * f..(perm[i] + 1) * f].copy_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Classes { labels, num_classes } => {
                let mut l = vec![0; n];
                for i in 0..n {
                    l[perm[i]] = labels[i];
                }
                Targets::Classes {
                    labels: l,
                    num_classes: *num_classes,
                }
            }
            Targets::Regression(v) => {
                let mut t = vec![0.0; n];
                for i in 0..n {
                    t[perm[i]] = v[i];
                }
                Targets::Regression(t)
            }
        };
        NodeData {
            features,
            num_features: f,
            feature_names: self.feature_names.clone(),
            targets,
            imputed: self.imputed.iter().map(|&(i, c)| (perm[i], c)).collect(),
        }
    }
}

fn standard_scale(col: &[f64]) -> Vec<f64> {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return vec![0.0; col.len()];
    }
    col.iter().map(|x| (x - mean) / sd).collect()
}

/// Empirical quantiles mapped to standard-normal quantiles. Rank `r`
/// (0-based, ties averaged) maps to `Phi^-1((r + 0.5) / n)`.
fn quantile_normal(col: &[f64]) -> Vec<f64> {
    let n = col.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && col[order[end]] == col[order[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0;
        let z = normal.inverse_cdf((rank + 0.5) / n as f64);
        for &i in &order[start..end] {
            out[i] = z;
        }
        start = end;
    }
    out
}

/// Reads a CSV node table with a header row and aligns it to `graph`'s node
/// order. Empty numeric cells are imputed with the column mean.
pub fn load_node_table(path: impl AsRef<Path>, schema: &NodeTableSchema, graph: &Graph) -> Result<NodeData> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, 1, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::NodeTable(format!("column {name:?} not found in {}", path.display())))
    };
    let id_col = col(&schema.id_column)?;
    let target_col = col(&schema.target_column)?;
    let feature_cols: Vec<usize> = match &schema.feature_columns {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&c| c != id_col && c != target_col).collect(),
    };

    let index: HashMap<i64, usize> = graph
        .original_ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let n = graph.n();
    let f = feature_cols.len();
    let mut features = vec![f64::NAN; n * f];
    let mut raw_targets: Vec<Option<String>> = vec![None; n];
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| csv_error(path, line, e))?;
        let id_text = record.get(id_col).unwrap_or("");
        let id: i64 = id_text.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("node id {id_text:?} is not an integer"),
        })?;
        let node = *index
            .get(&id)
            .ok_or_else(|| Error::NodeTable(format!("line {line}: node id {id} is not in the graph")))?;
        if raw_targets[node].is_some() {
            return Err(Error::NodeTable(format!("line {line}: duplicate node id {id}")));
        }
        for (k, &c) in feature_cols.iter().enumerate() {
            let cell = record.get(c).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("non-numeric feature {cell:?} in column {:?}", headers[c]),
            })?;
            features[node * f + k] = v;
        }
        raw_targets[node] = Some(record.get(target_col).unwrap_or("").to_string());
        rows += 1;
    }
    if rows != n {
        return Err(Error::NodeTable(format!(
            "{} has {rows} rows but the graph has {n} nodes",
            path.display()
        )));
    }

    let mut imputed = Vec::new();
    for k in 0..f {
        let present: Vec<f64> = (0..n).map(|i| features[i * f + k]).filter(|v| !v.is_nan()).collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        for i in 0..n {
            if features[i * f + k].is_nan() {
                features[i * f + k] = mean;
                imputed.push((i, k));
            }
        }
    }
    imputed.sort_unstable();

    let raw: Vec<String> = raw_targets.into_iter().map(|t| t.unwrap_or_default()).collect();
    let targets = parse_targets(&raw, schema.task)?;
    Ok(NodeData {
        features,
        num_features: f,
        feature_names: feature_cols.iter().map(|&c| headers[c].clone()).collect(),
        targets,
        imputed,
    })
}

fn parse_targets(raw: &[String], task: TaskKind) -> Result<Targets> {
    if let Some(i) = raw.iter().position(|s| s.is_empty()) {
        return Err(Error::NodeTable(format!("missing target for node {i}")));
    }
    match task {
        TaskKind::Regression => {
            let v = raw
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::NodeTable(format!("non-numeric regression target {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Targets::Regression(v))
        }
        TaskKind::Multiclass | TaskKind::Binary => {
            // integer labels sort numerically, anything else lexically
            let numeric: Option<Vec<i64>> = raw.iter().map(|s| s.parse().ok()).collect();
            let labels = match numeric {
                Some(vals) => {
                    let distinct: BTreeMap<i64, usize> = vals.iter().map(|&v| (v, 0)).collect::<BTreeMap<_, _>>();
                    let map: HashMap<i64, usize> = distinct.keys().enumerate().map(|(i, &k)| (k, i)).collect();
                    vals.iter().map(|v| map[v]).collect::<Vec<_>>()
                }
                None => {
                    let distinct: BTreeMap<&str, usize> = raw.iter().map(|s| (s.as_str(), 0)).collect();
                    let map: HashMap<&str, usize> = distinct.keys().enumerate().map(|(i, &k)| (k, i)).collect();
                    raw.iter().map(|s| map[s.as_str()]).collect()
                }
            };
            let num_classes = labels.iter().max().map_or(0, |m| m + 1);
            if task == TaskKind::Binary && num_classes != 2 {
                return Err(Error::NodeTable(format!(
                    "binary task needs exactly 2 classes, found {num_classes}"
                )));
            }
            Ok(Targets::Classes { labels, num_classes })
        }
    }
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn schema() -> NodeTableSchema {
        NodeTableSchema {
            id_column: "id".into(),
            feature_columns: None,
            target_column: "label".into(),
            task: TaskKind::Multiclass,
        }
    }

    #[test]
    fn edge_list_symmetrizes_and_drops_loops() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.txt", "# comment\n0 1\n1,0\n1 1\n");
        let g = load_edge_list(&p, true).unwrap();
        assert_eq!((g.n(), g.m()), (2, 1));
    }

    #[test]
    fn edge_list_header_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "node_1,node_2\n0,1\n1,2\n");
        let g = load_edge_list(&p, false).unwrap();
        assert_eq!((g.n(), g.m()), (3, 2));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.txt", "0 1\n1 x\n");
        match load_edge_list(&p, false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_edge_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.txt", "# nothing\n\n");
        assert!(matches!(load_edge_list(&p, false), Err(Error::Empty(_))));
    }

    #[test]
    fn reload_of_written_graph_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.txt", "5 3\n3 9\n9 5\n5 3\n2 9\n");
        let g = load_edge_list(&p, false).unwrap();
        let q = dir.path().join("out.txt");
        write_edge_list(&g, &q).unwrap();
        let h = load_edge_list(&q, false).unwrap();
        assert_eq!(g, h);
    }

    #[test]
    fn node_table_three_nodes() {
        let dir = tempfile::tempdir().unwrap();
        let g = Graph::from_labeled_edges(&[(10, 11), (11, 12)]);
        let p = write(&dir, "n.csv", "id,a,b,label\n12,5,6,1\n10,1,2,0\n11,3,4,2\n");
        let d = load_node_table(&p, &schema(), &g).unwrap();
        assert_eq!(d.num_features, 2);
        assert_eq!(d.features, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(d.targets.class_labels().unwrap(), &[0, 2, 1]);
        assert_eq!(d.task(), TaskKind::Multiclass);
    }

    #[test]
    fn node_table_unknown_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = Graph::from_labeled_edges(&[(0, 1)]);
        let p = write(&dir, "n.csv", "id,a,label\n0,1,0\n7,2,1\n");
        assert!(matches!(load_node_table(&p, &schema(), &g), Err(Error::NodeTable(_))));
    }

    #[test]
    fn node_table_row_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let g = Graph::from_labeled_edges(&[(0, 1), (1, 2)]);
        let p = write(&dir, "n.csv", "id,a,label\n0,1,0\n1,2,1\n");
        assert!(matches!(load_node_table(&p, &schema(), &g), Err(Error::NodeTable(_))));
    }

    #[test]
    fn node_table_non_numeric_feature() {
        let dir = tempfile::tempdir().unwrap();
        let g = Graph::from_labeled_edges(&[(0, 1)]);
        let p = write(&dir, "n.csv", "id,a,label\n0,abc,0\n1,2,1\n");
        assert!(matches!(
            load_node_table(&p, &schema(), &g),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn missing_cells_imputed_with_mean() {
        let dir = tempfile::tempdir().unwrap();
        let g = Graph::from_labeled_edges(&[(0, 1), (1, 2)]);
        let p = write(&dir, "n.csv", "id,a,label\n0,1,0\n1,,1\n2,3,0\n");
        let d = load_node_table(&p, &schema(), &g).unwrap();
        assert_eq!(d.features, vec![1.0, 2.0, 3.0]);
        assert_eq!(d.imputed, vec![(1, 0)]);
    }

    #[test]
    fn constant_column_scales_to_zero() {
        let d = NodeData {
            features: vec![3.0, 1.0, 3.0, 2.0, 3.0, 3.0],
            num_features: 2,
            feature_names: vec!["c".into(), "x".into()],
            targets: Targets::Regression(vec![0.0; 3]),
            imputed: vec![],
        };
        let s = d.transformed(FeatureTransform::StandardScale);
        assert_eq!([s.features[0], s.features[2], s.features[4]], [0.0, 0.0, 0.0]);
        let mean: f64 = (0..3).map(|i| s.features[i * 2 + 1]).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn quantile_transform_midpoint_ranks() {
        let z = quantile_normal(&[10.0, -1.0, 5.0, 5.0]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        // ranks: -1 -> 0, 5 -> 1.5 (tie), 10 -> 3
        assert!((z[1] - normal.inverse_cdf(0.5 / 4.0)).abs() < 1e-12);
        assert!((z[2] - normal.inverse_cdf(2.0 / 4.0)).abs() < 1e-12);
        assert_eq!(z[2], z[3]);
        assert!((z[0] - normal.inverse_cdf(3.5 / 4.0)).abs() < 1e-12);
    }
}
