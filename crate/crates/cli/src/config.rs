//! Experiment configuration: one JSON file per experiment, with
//! `--set path=value` overrides applied before validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use clatt_core::clustering::{AlgorithmTag, HierarchicalParams, KMeansParams, LeidenParams, PlantedPartitionParams};
use clatt_core::graph::NodeTableSchema;
use clatt_core::model::{ConvType, DeepWalkParams, ModelSpec};
use clatt_core::synthetic::SbmDatasetSpec;
use clatt_core::train::{Grid, TrainConfig};

use crate::UserError;

pub const OUTPUT_DIR_ENV: &str = "CLATT_OUTPUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub deepwalk: DeepWalkParams,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

/// Either files on disk or a generated stochastic block model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(default)]
    pub graph: Option<PathBuf>,
    #[serde(default)]
    pub directed: bool,
    #[serde(default)]
    pub node_table: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<NodeTableSchema>,
    #[serde(default)]
    pub synthetic: Option<SbmDatasetSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.1, 0.1, 0.8],
            seed: 0,
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub leiden: LeidenParams,
    pub planted: PlantedPartitionParams,
    pub hierarchical: HierarchicalParams,
    pub kmeans: KMeansParams,
    /// Residual MLP whose hidden states k-means clusters; defaults to the
    /// first model's sizes.
    pub km_model: Option<ModelSpec>,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            leiden: LeidenParams::default(),
            planted: PlantedPartitionParams::default(),
            hierarchical: HierarchicalParams::default(),
            kmeans: KMeansParams::default(),
            km_model: None,
            min_size: 4,
            max_size: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub base: ModelSpec,
    pub candidates: Vec<AlgorithmTag>,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            base: ModelSpec {
                conv: ConvType::Lgt,
                ..ModelSpec::default()
            },
            candidates: AlgorithmTag::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// Sets `value` at a dotted path such as `models.0.lr`, creating objects
/// on the way. The value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!(UserError(format!("--set expects key=value, got {assignment:?}")));
    };
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| UserError(format!("--set {path}: {key:?} is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| UserError(format!("--set {path}: index {idx} out of range ({len} items)")))?
            }
            Value::Object(map) => map.entry(key.to_string()).or_insert(if last {
                Value::Null
            } else {
                Value::Object(Default::default())
            }),
            _ => bail!(UserError(format!(
                "--set {path}: {key:?} is not inside an object or array"
            ))),
        };
    }
    *node = value;
    Ok(())
}

pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory relative paths in the config resolve against.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// `--out`, then the config's `output_dir`, then the environment
    /// variable, then `clatt-output`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.config.output_dir {
            return self.resolve(p);
        }
        std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| PathBuf::from("clatt-output"), PathBuf::from)
    }
}

pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| UserError(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| UserError(format!("{}: invalid JSON: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| UserError(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))?;
    let loaded = LoadedConfig {
        config,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    validate(&loaded).context("invalid config")?;
    Ok(loaded)
}

fn validate(l: &LoadedConfig) -> Result<()> {
    let c = &l.config;
    let err = |field: &str, msg: String| -> Result<()> { bail!(UserError(format!("at `{field}`: {msg}"))) };
    if c.seeds.is_empty() {
        return err("seeds", "at least one seed is required".into());
    }
    let d = &c.dataset;
    match (&d.graph, &d.synthetic) {
        (Some(_), Some(_)) | (None, None) => {
            return err("dataset", "give exactly one of `graph` and `synthetic`".into())
        }
        (Some(g), None) => {
            for (field, p) in [
                ("dataset.graph", Some(g)),
                ("dataset.node_table", d.node_table.as_ref()),
            ] {
                if let Some(p) = p {
                    if !l.resolve(p).exists() {
                        return err(field, format!("file {} does not exist", l.resolve(p).display()));
                    }
                }
            }
            if d.node_table.is_some() != d.schema.is_some() {
                return err("dataset.schema", "`node_table` and `schema` go together".into());
            }
        }
        (None, Some(_)) => {}
    }
    for (i, m) in c.models.iter().enumerate() {
        if let Err(e) = m.validate() {
            return err(&format!("models.{i}"), e.to_string());
        }
    }
    if let Err(e) = c.selection.base.validate() {
        return err("selection.base", e.to_string());
    }
    if c.clustering.min_size > c.clustering.max_size {
        return err("clustering.min_size", "must not exceed max_size".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_set_nested_values() {
        let mut v = json!({"models": [{"lr": 0.1}], "train": {}});
        apply_override(&mut v, "models.0.lr=0.5").unwrap();
        apply_override(&mut v, "train.steps=7").unwrap();
        apply_override(&mut v, "dataset.name=abc").unwrap();
        assert_eq!(v["models"][0]["lr"], json!(0.5));
        assert_eq!(v["train"]["steps"], json!(7));
        assert_eq!(v["dataset"]["name"], json!("abc"));
        assert!(apply_override(&mut v, "models.3.lr=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }
}
