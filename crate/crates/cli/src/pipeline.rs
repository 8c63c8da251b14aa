//! Shared stages: dataset loading, splitting, clusterings and positional
//! encodings.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use clatt_core::clustering::{
    filter_clusters, hierarchical_fit, kmeans, planted_partition_fit, AlgorithmTag, Clustering,
};
use clatt_core::graph::{load_edge_list, load_node_table, Graph, NodeData};
use clatt_core::model::{deepwalk_pe, laplacian_pe, ConvType, DeepWalkParams, ModelSpec, PeKind};
use clatt_core::synthetic::sbm_dataset;
use clatt_core::train::{make_split, resmlp_representations, Dataset, Split};

use crate::config::LoadedConfig;
use crate::UserError;

pub fn load_dataset(l: &LoadedConfig) -> Result<Dataset> {
    let d = &l.config.dataset;
    let (graph, data) = if let Some(spec) = &d.synthetic {
        sbm_dataset(spec)
    } else {
        let path = l.resolve(d.graph.as_ref().expect("validated"));
        let graph = load_edge_list(&path, d.directed)?;
        let (Some(table), Some(schema)) = (&d.node_table, &d.schema) else {
            bail!(UserError(
                "training needs `dataset.node_table` and `dataset.schema`".into()
            ));
        };
        let data = load_node_table(l.resolve(table), schema, &graph)?;
        (graph, data)
    };
    Ok(Dataset::new(d.name.clone(), graph, data)?)
}

pub fn split(l: &LoadedConfig, data: &NodeData) -> Result<Split> {
    let s = &l.config.split;
    Ok(make_split(&data.targets, s.ratios, s.seed, s.stratified)?)
}

/// Runs one graph clustering algorithm. `KM` needs node data and is
/// handled by [`km_clustering`].
pub fn graph_clustering(l: &LoadedConfig, g: &Graph, tag: AlgorithmTag) -> Result<Clustering> {
    let c = &l.config.clustering;
    Ok(match tag {
        AlgorithmTag::LA => c.leiden.run(g)?.clustering,
        AlgorithmTag::BPP => planted_partition_fit(g, &c.planted)?,
        AlgorithmTag::H1 => hierarchical_fit(g, &c.hierarchical)?.clustering().clone(),
        AlgorithmTag::KM => bail!(UserError(
            "KM clusters learned representations and needs node data".into()
        )),
    })
}

pub fn km_clustering(l: &LoadedConfig, ds: &Dataset, split: &Split) -> Result<Clustering> {
    let c = &l.config;
    let template = c
        .clustering
        .km_model
        .clone()
        .or_else(|| c.models.first().cloned())
        .unwrap_or_default();
    let template = ModelSpec {
        conv: ConvType::ResMlp,
        ..template
    };
    let seed = c.clustering.kmeans.seed;
    let reps = resmlp_representations(&template, &c.train, ds, split, seed)?;
    let mut result = kmeans(reps.data(), reps.cols(), &c.clustering.kmeans)?.clustering;
    result.meta.algorithm = Some(AlgorithmTag::KM);
    Ok(result)
}

/// Computes every clustering in `tags`, stores the size-filtered versions
/// in `ds`, and writes the unfiltered ones under `dir`.
pub fn attach_clusterings(
    l: &LoadedConfig,
    ds: &mut Dataset,
    split: &Split,
    tags: &[AlgorithmTag],
    dir: &Path,
) -> Result<()> {
    let mut tags = tags.to_vec();
    tags.sort();
    tags.dedup();
    if tags.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let cfg = &l.config.clustering;
    for tag in tags {
        let c = match tag {
            AlgorithmTag::KM => km_clustering(l, ds, split)?,
            _ => graph_clustering(l, &ds.graph, tag)?,
        };
        c.write_csv(&ds.graph, dir.join(format!("{tag}.csv")))?;
        ds.set_clustering(tag, filter_clusters(&c, cfg.min_size, cfg.max_size));
    }
    Ok(())
}

/// Computes the positional encodings used by `specs`.
pub fn attach_pes(l: &LoadedConfig, ds: &mut Dataset, specs: &[&ModelSpec]) -> Result<()> {
    let mut need: Vec<(PeKind, usize)> = Vec::new();
    for s in specs.iter().filter(|s| s.conv == ConvType::Ggt && s.pe != PeKind::None) {
        match need.iter().find(|(k, _)| *k == s.pe) {
            Some((_, d)) if *d != s.pe_dim => {
                bail!(UserError(format!(
                    "models disagree on the {:?} encoding size ({d} vs {})",
                    s.pe, s.pe_dim
                )))
            }
            Some(_) => {}
            None => need.push((s.pe, s.pe_dim)),
        }
    }
    for (kind, dim) in need {
        let pe = match kind {
            PeKind::Laplacian => laplacian_pe(&ds.graph, dim)?.pe,
            PeKind::Deepwalk => deepwalk_pe(
                &ds.graph,
                &DeepWalkParams {
                    dim,
                    ..l.config.deepwalk
                },
            )?,
            PeKind::None => continue,
        };
        ds.set_pe(kind, pe);
    }
    Ok(())
}
