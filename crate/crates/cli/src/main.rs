//! `clatt`: graph statistics, clustering, training, clustering selection
//! and attention analysis from the command line.
//!
//! Exit codes: 0 success, 2 user or input error, 3 internal invariant
//! violation.

mod config;
mod pipeline;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use clatt_core::analysis::{
    attention_distance_profile, export_histogram, export_similarity_matrix, quantile_table, quantiles,
    DEFAULT_QUANTILES,
};
use clatt_core::clustering::{AlgorithmTag, Clustering};
use clatt_core::graph::{graph_stats, load_edge_list, load_node_table, NodeTableSchema, StatsOptions, TaskKind};
use clatt_core::model::Model;
use clatt_core::train::{grid_search, run_experiment_with, select_clusterings, TrainConfig};

use config::LoadedConfig;

/// An error caused by the user's input rather than by the program.
#[derive(Debug)]
pub struct UserError(pub String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Parser)]
#[command(
    name = "clatt",
    version,
    about = "Cluster attention experiments for graph neural networks"
)]
struct Cli {
    /// Worker threads for independent runs (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set models.0.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: config `output_dir`, then $CLATT_OUTPUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print graph statistics as JSON.
    Stats {
        graph: PathBuf,
        #[arg(long)]
        directed: bool,
        /// Node table for label statistics.
        #[arg(long, requires = "target")]
        node_table: Option<PathBuf>,
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value = "id")]
        id_column: String,
        #[arg(long, value_enum, default_value = "multiclass")]
        task: TaskArg,
        /// Largest component size for exact all-pairs distances.
        #[arg(long, default_value_t = 20_000)]
        exact_threshold: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster a graph and write `node_id,cluster_id` CSV plus metadata.
    Cluster {
        /// LA, BPP, H1 or KM.
        #[arg(long)]
        algo: String,
        /// Edge list; KM needs `--config` instead.
        #[arg(long, required_unless_present = "config")]
        graph: Option<PathBuf>,
        #[arg(long)]
        directed: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// CPM resolution for LA (default: graph density).
        #[arg(long)]
        gamma: Option<f64>,
        /// Cluster count for KM.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlation-coefficient matrix of clusterings of the same graph.
    Compare {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        directed: bool,
        #[arg(required = true, num_args = 2..)]
        clusterings: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configured model over all seeds and report mean ± std.
    Train(ConfigArgs),
    /// Pick the clusterings that improve the base model on validation.
    SelectClusterings(ConfigArgs),
    /// Attention-distance profile of a trained checkpoint.
    AnalyzeAttention {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the config's `models`.
        #[arg(long, default_value_t = 0)]
        model: usize,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TaskArg {
    Multiclass,
    Binary,
    Regression,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UserError>() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<clatt_core::Error>() {
            return match core {
                clatt_core::Error::Invariant(_) | clatt_core::Error::Autodiff(_) => 3,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    3
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Stats {
            graph,
            directed,
            node_table,
            target,
            id_column,
            task,
            exact_threshold,
            out,
        } => cmd_stats(
            &graph,
            directed,
            node_table.as_deref(),
            target,
            id_column,
            task,
            exact_threshold,
            out.as_deref(),
        ),
        Command::Cluster {
            algo,
            graph,
            directed,
            config,
            overrides,
            seed,
            gamma,
            k,
            out,
        } => cmd_cluster(
            &algo,
            graph.as_deref(),
            directed,
            config.as_deref(),
            &overrides,
            seed,
            gamma,
            k,
            &out,
        ),
        Command::Compare {
            graph,
            directed,
            clusterings,
            out,
        } => cmd_compare(&graph, directed, &clusterings, &out),
        Command::Train(a) => cmd_train(&a),
        Command::SelectClusterings(a) => cmd_select(&a),
        Command::AnalyzeAttention {
            args,
            checkpoint,
            model,
            bins,
        } => cmd_analyze(&args, &checkpoint, model, bins),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!(UserError(format!("file not found: {}", p.display())));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_stats(
    graph: &Path,
    directed: bool,
    node_table: Option<&Path>,
    target: Option<String>,
    id_column: String,
    task: TaskArg,
    exact_threshold: usize,
    out: Option<&Path>,
) -> Result<()> {
    require_file(graph)?;
    let g = load_edge_list(graph, directed)?;
    let data = match node_table {
        Some(p) => {
            require_file(p)?;
            let schema = NodeTableSchema {
                id_column,
                feature_columns: Some(Vec::new()),
                target_column: target.expect("clap enforces --target"),
                task: match task {
                    TaskArg::Multiclass => TaskKind::Multiclass,
                    TaskArg::Binary => TaskKind::Binary,
                    TaskArg::Regression => TaskKind::Regression,
                },
            };
            Some(load_node_table(p, &schema, &g)?)
        }
        None => None,
    };
    let opts = StatsOptions {
        exact_threshold,
        ..StatsOptions::default()
    };
    let stats = graph_stats(&g, data.as_ref(), &opts)?;
    let text = serde_json::to_string_pretty(&stats)?;
    println!("{text}");
    if let Some(p) = out {
        write(p, &text)?;
    }
    Ok(())
}

fn parse_tag(s: &str) -> Result<AlgorithmTag> {
    s.parse::<AlgorithmTag>().map_err(|e| UserError(e.to_string()).into())
}

#[allow(clippy::too_many_arguments)]
fn cmd_cluster(
    algo: &str,
    graph: Option<&Path>,
    directed: bool,
    config: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    gamma: Option<f64>,
    k: Option<usize>,
    out: &Path,
) -> Result<()> {
    let tag = parse_tag(algo)?;
    let mut loaded = match config {
        Some(p) => config::load(p, overrides)?,
        None => {
            let g = graph.expect("clap requires --graph without --config");
            require_file(g)?;
            LoadedConfig {
                config: serde_json::from_value(
                    json!({"dataset": {"name": "graph", "graph": g, "directed": directed}}),
                )?,
                base_dir: PathBuf::new(),
            }
        }
    };
    let c = &mut loaded.config.clustering;
    if let Some(s) = seed {
        c.leiden.seed = s;
        c.planted.seed = s;
        c.hierarchical.seed = s;
        c.kmeans.seed = s;
    }
    if gamma.is_some() {
        c.leiden.gamma = gamma;
    }
    if k.is_some() {
        c.kmeans.k = k;
    }
    let (graph, clustering) = if tag == AlgorithmTag::KM {
        if config.is_none() {
            bail!(UserError(
                "KM needs --config with node data to learn representations".into()
            ));
        }
        let ds = pipeline::load_dataset(&loaded)?;
        let split = pipeline::split(&loaded, &ds.data)?;
        let c = pipeline::km_clustering(&loaded, &ds, &split)?;
        (ds.graph, c)
    } else {
        let g = match (&loaded.config.dataset.synthetic, &loaded.config.dataset.graph) {
            (Some(spec), _) => clatt_core::synthetic::sbm_dataset(spec).0,
            (None, Some(p)) => load_edge_list(loaded.resolve(p), loaded.config.dataset.directed)?,
            (None, None) => bail!(UserError("no graph given".into())),
        };
        let c = pipeline::graph_clustering(&loaded, &g, tag)?;
        (g, c)
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    clustering.write_csv(&graph, out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "algorithm": tag,
            "num_nodes": clustering.num_nodes(),
            "num_clusters": clustering.num_clusters(),
            "quality": clustering.meta.quality,
            "output": out,
        }))?
    );
    Ok(())
}

fn cmd_compare(graph: &Path, directed: bool, files: &[PathBuf], out: &Path) -> Result<()> {
    require_file(graph)?;
    let g = load_edge_list(graph, directed)?;
    let mut named: Vec<(String, Clustering)> = Vec::new();
    for f in files {
        require_file(f)?;
        let c = Clustering::read_csv(&g, f)?;
        let stem = f
            .file_stem()
            .map_or_else(|| f.display().to_string(), |s| s.to_string_lossy().into_owned());
        let mut name = c.meta.algorithm.map_or(stem.clone(), |t| t.to_string());
        if named.iter().any(|(n, _)| *n == name) {
            name = format!("{name}:{stem}");
        }
        named.push((name, c));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let m = export_similarity_matrix(&named, out)?;
    print!("{}", m.to_csv());
    for n in &m.notes {
        eprintln!("note: {n}");
    }
    Ok(())
}

fn clustering_tags(loaded: &LoadedConfig) -> Vec<AlgorithmTag> {
    loaded
        .config
        .models
        .iter()
        .filter(|m| m.use_clatt)
        .flat_map(|m| m.clusterings.clone())
        .collect()
}

fn cmd_train(a: &ConfigArgs) -> Result<()> {
    let loaded = config::load(&a.config, &a.overrides)?;
    let c = &loaded.config;
    if c.models.is_empty() {
        bail!(UserError("at `models`: no models to train".into()));
    }
    if c.seeds.len() < 2 {
        bail!(UserError("at `seeds`: training needs at least two seeds".into()));
    }
    let out = loaded.output_dir(a.out.as_deref());
    let mut ds = pipeline::load_dataset(&loaded)?;
    let split = pipeline::split(&loaded, &ds.data)?;
    pipeline::attach_clusterings(
        &loaded,
        &mut ds,
        &split,
        &clustering_tags(&loaded),
        &out.join("clusterings"),
    )?;
    pipeline::attach_pes(&loaded, &mut ds, &c.models.iter().collect::<Vec<_>>())?;

    let mut runs: Vec<(clatt_core::model::ModelSpec, TrainConfig)> =
        c.models.iter().map(|m| (m.clone(), c.train.clone())).collect();
    if let Some(grid) = &c.grid {
        let mut trials = Vec::new();
        for run in &mut runs {
            let r = grid_search(&run.0, &run.1, grid, &ds, &split, c.seeds[0])?;
            *run = (r.best.spec.clone(), r.best.config.clone());
            trials.push(r);
        }
        write(&out.join("grid.json"), &serde_json::to_string_pretty(&trials)?)?;
    }
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let failures = Mutex::new(Vec::new());
    let report = run_experiment_with(&ds, &runs, &split, &c.seeds, |m, seed, outcome| {
        let path = ckpt_dir.join(format!("model{m}_{}_seed{seed}.ckpt", runs[m].0.label()));
        if let Err(e) = outcome.model.save(&path) {
            failures
                .lock()
                .expect("no panics while holding the lock")
                .push(e.to_string());
        }
        Ok(())
    })?;
    if let Some(e) = failures.into_inner().expect("lock not poisoned").first() {
        bail!("saving checkpoint: {e}");
    }
    write(&out.join("results.csv"), &report.to_csv())?;
    write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_select(a: &ConfigArgs) -> Result<()> {
    let loaded = config::load(&a.config, &a.overrides)?;
    let c = &loaded.config;
    let out = loaded.output_dir(a.out.as_deref());
    let mut ds = pipeline::load_dataset(&loaded)?;
    let split = pipeline::split(&loaded, &ds.data)?;
    let sel = &c.selection;
    pipeline::attach_clusterings(&loaded, &mut ds, &split, &sel.candidates, &out.join("clusterings"))?;
    pipeline::attach_pes(&loaded, &mut ds, &[&sel.base])?;
    let selection = select_clusterings(&sel.base, &c.train, &sel.candidates, &ds, &split, sel.seed)?;
    let text = serde_json::to_string_pretty(&json!({
        "dataset": ds.name,
        "base": sel.base.label(),
        "baseline_val": selection.baseline_val,
        "candidates": selection.candidates.iter().map(|(t, v)| json!({"clustering": t, "val": v})).collect::<Vec<_>>(),
        "selected": selection.selected,
    }))?;
    write(&out.join("selected_clusterings.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_analyze(a: &ConfigArgs, checkpoint: &Path, model_index: usize, bins: usize) -> Result<()> {
    require_file(checkpoint)?;
    let loaded = config::load(&a.config, &a.overrides)?;
    let c = &loaded.config;
    let Some(spec) = c.models.get(model_index) else {
        bail!(UserError(format!("at `models`: no model with index {model_index}")));
    };
    let out = loaded.output_dir(a.out.as_deref());
    let mut ds = pipeline::load_dataset(&loaded)?;
    let split = pipeline::split(&loaded, &ds.data)?;
    let tags = if spec.use_clatt {
        spec.clusterings.clone()
    } else {
        Vec::new()
    };
    pipeline::attach_clusterings(&loaded, &mut ds, &split, &tags, &out.join("clusterings"))?;
    pipeline::attach_pes(&loaded, &mut ds, &[spec])?;
    let pe_dim = ds.pe(spec.pe).map_or(0, |t| t.cols());
    let mut model = Model::new(spec, ds.data.num_features, ds.output_dim(), pe_dim, 0)?;
    model.load_params(checkpoint).map_err(|e| {
        UserError(format!(
            "checkpoint {} does not fit model {model_index}: {e}",
            checkpoint.display()
        ))
    })?;
    let ctx = ds.context(spec, c.train.feature_transform)?;
    let profile = attention_distance_profile(&model, &ds.graph, &ctx)?;
    if profile.entries.is_empty() {
        bail!(UserError(format!("model {} has no attention to analyze", spec.label())));
    }
    write(&out.join("attention_profile.csv"), &profile.to_csv(&ds.graph))?;
    let mut rows = Vec::new();
    let mut qcsv = String::from("model,kind,q05,q25,q50,q75,q95\n");
    for kind in profile.kinds() {
        let values = profile.distances(kind);
        fs::create_dir_all(&out)?;
        export_histogram(&values, bins, out.join(format!("histogram_{}.csv", kind.name())))?;
        let q = quantiles(&values, &DEFAULT_QUANTILES)?;
        let cells: Vec<String> = q.iter().map(|v| format!("{v:?}")).collect();
        qcsv.push_str(&format!("{},{},{}\n", spec.label(), kind.name(), cells.join(",")));
        rows.push((format!("{} {}", spec.label(), kind.name()), values));
    }
    write(&out.join("attention_quantiles.csv"), &qcsv)?;
    print!("{}", quantile_table(&rows, &DEFAULT_QUANTILES)?);
    if profile.unreachable > 0 {
        eprintln!(
            "note: {} attended pairs were unreachable and excluded with renormalization",
            profile.unreachable
        );
    }
    Ok(())
}
