//! Layer stack: input encoder, residual blocks with optional cluster
//! attention, and a prediction head.
//!
//! Every block computes `h += Mix(LN(h))` then `h += MLP(LN(h))`. `Mix` is
//! the chosen convolution; with cluster attention enabled its output is
//! concatenated with one attention output per clustering and projected
//! back to the hidden size.

mod attention;
mod conv;
mod pe;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{AlgorithmTag, FilteredClustering};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{load_checkpoint, save_checkpoint, SparseMatrix, Tape, Tensor, Var};

pub use attention::{
    attention, attention_edges, build_cluster_batch, clatt_forward, fuse, AttentionEdge, AttentionTables,
    AttentionVars, ClusterBatch,
};
pub use conv::{gcn_adjacency, mean_adjacency};
pub use pe::{deepwalk_pe, laplacian_pe, DeepWalkParams, LaplacianPe, MAX_DENSE_EIGEN};

/// Largest graph for which all-pairs attention is materialized.
pub const MAX_GLOBAL_NODES: usize = 20_000;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvType {
    Gcn,
    Sage,
    /// Local graph transformer: attention over `N(i) ∪ {i}`.
    Lgt,
    /// Global graph transformer: attention over all nodes.
    Ggt,
    /// No graph mixing; residual MLP blocks only.
    ResMlp,
}

impl ConvType {
    pub fn name(self) -> &'static str {
        match self {
            ConvType::Gcn => "GCN",
            ConvType::Sage => "SAGE",
            ConvType::Lgt => "LGT",
            ConvType::Ggt => "GGT",
            ConvType::ResMlp => "ResMLP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    None,
    Deepwalk,
    Laplacian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub conv: ConvType,
    pub use_clatt: bool,
    /// Clusterings attended to, in concatenation order.
    pub clusterings: Vec<AlgorithmTag>,
    pub pe: PeKind,
    pub pe_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub lr: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            conv: ConvType::Gcn,
            use_clatt: false,
            clusterings: Vec::new(),
            pe: PeKind::None,
            pe_dim: 128,
            layers: 3,
            hidden: 512,
            heads: 4,
            dropout: 0.0,
            lr: 1e-3,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.use_clatt && self.clusterings.is_empty() {
            return bad("cluster attention needs at least one clustering".into());
        }
        if self.conv == ConvType::Ggt && self.pe == PeKind::None {
            return bad("global graph transformer needs positional encodings".into());
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        Ok(())
    }

    /// Short label such as `GCN-CLATT` or `GGT-Lap`.
    pub fn label(&self) -> String {
        let mut s = self.conv.name().to_string();
        if self.conv == ConvType::Ggt {
            s.push_str(match self.pe {
                PeKind::Deepwalk => "-DW",
                PeKind::Laplacian => "-Lap",
                PeKind::None => "",
            });
        }
        if self.use_clatt {
            s.push_str("-CLATT");
        }
        s
    }
}

/// Graph-derived inputs shared by every forward pass of a run.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub num_nodes: usize,
    pub features: Tensor,
    pub pe: Option<Tensor>,
    gcn: Option<Arc<SparseMatrix>>,
    mean: Option<Arc<SparseMatrix>>,
    local: Option<Arc<AttentionTables>>,
    global: Option<Arc<AttentionTables>>,
    clusters: Vec<Arc<AttentionTables>>,
}

impl GraphContext {
    /// `features` is `n x f`; `clusterings` follows `spec.clusterings`.
    pub fn new(
        spec: &ModelSpec,
        g: &Graph,
        features: Tensor,
        pe: Option<Tensor>,
        clusterings: &[FilteredClustering],
    ) -> Result<Self> {
        spec.validate()?;
        let n = g.n();
        if features.shape().len() != 2 || features.rows() != n {
            return Err(Error::Shape {
                op: "graph_context",
                lhs: features.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let mut ctx = GraphContext {
            num_nodes: n,
            features,
            pe: None,
            gcn: None,
            mean: None,
            local: None,
            global: None,
            clusters: Vec::new(),
        };
        match spec.conv {
            ConvType::Gcn => ctx.gcn = Some(Arc::new(gcn_adjacency(g))),
            ConvType::Sage => ctx.mean = Some(Arc::new(mean_adjacency(g))),
            ConvType::Lgt => ctx.local = Some(Arc::new(AttentionTables::local(g)?)),
            ConvType::Ggt => {
                if n > MAX_GLOBAL_NODES {
                    return Err(Error::TooLarge(format!(
                        "global attention over {n} nodes exceeds the desk-scale limit of {MAX_GLOBAL_NODES}"
                    )));
                }
                let pe = pe.ok_or_else(|| Error::Config("global attention needs a positional encoding".into()))?;
                if pe.rows() != n {
                    return Err(Error::Shape {
                        op: "positional_encoding",
                        lhs: pe.shape().to_vec(),
                        rhs: vec![n],
                    });
                }
                ctx.pe = Some(pe);
                ctx.global = Some(Arc::new(AttentionTables::global(n)?));
            }
            ConvType::ResMlp => {}
        }
        if spec.use_clatt {
            if clusterings.len() != spec.clusterings.len() {
                return Err(Error::Config(format!(
                    "spec lists {} clusterings but {} were supplied",
                    spec.clusterings.len(),
                    clusterings.len()
                )));
            }
            for fc in clusterings {
                if fc.num_nodes() != n {
                    return Err(Error::InvalidParameter(format!(
                        "clustering covers {} nodes, graph has {n}",
                        fc.num_nodes()
                    )));
                }
                let batch = build_cluster_batch(fc)?;
                ctx.clusters.push(Arc::new(AttentionTables::clusters(&batch)?));
            }
        }
        Ok(ctx)
    }

    pub fn tables(&self, kind: AttentionKind) -> Option<&AttentionTables> {
        match kind {
            AttentionKind::Local => self.local.as_deref(),
            AttentionKind::Global => self.global.as_deref(),
            AttentionKind::Cluster(i) => self.clusters.get(i).map(|t| &**t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    Local,
    Global,
    /// Index into the spec's clustering list.
    Cluster(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionRecord {
    pub layer: usize,
    pub kind: AttentionKind,
    pub probs: Var,
}

pub struct Forward {
    /// `n x out_dim`.
    pub output: Var,
    /// Final normalized hidden state fed to the head, `n x hidden`.
    pub hidden: Var,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
}

#[derive(Debug, Clone)]
enum Mix {
    None,
    Gcn(Lin),
    Sage(Lin),
    Attention { attn: Attn, out: Lin },
}

#[derive(Debug, Clone)]
struct Block {
    norm_mix: Norm,
    mix: Mix,
    clatt: Vec<Attn>,
    fuse: Option<Lin>,
    norm_mlp: Norm,
    mlp_in: Lin,
    mlp_out: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    input: Lin,
    pe: Option<Lin>,
    blocks: Vec<Block>,
    norm_out: Norm,
    head: Lin,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        let w = Tensor::glorot(fan_in, fan_out, self.rng);
        Lin {
            w: self.add(format!("{name}.w"), w),
            b: self.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: self.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn attn(&mut self, name: &str, fan_in: usize, d: usize) -> Attn {
        Attn {
            q: self.lin(&format!("{name}.q"), fan_in, d),
            k: self.lin(&format!("{name}.k"), fan_in, d),
            v: self.lin(&format!("{name}.v"), fan_in, d),
        }
    }
}

/// Parameters and layout of one model instance.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub in_dim: usize,
    pub out_dim: usize,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

impl Model {
    /// `pe_dim` is the width of the positional encoding, used by global
    /// attention only.
    pub fn new(spec: &ModelSpec, in_dim: usize, out_dim: usize, pe_dim: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidParameter(
                "input and output sizes must be positive".into(),
            ));
        }
        let d = spec.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        let input = b.lin("input", in_dim, d);
        let pe = (spec.conv == ConvType::Ggt).then(|| b.lin("pe", pe_dim.max(1), d));
        let mut blocks = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let p = format!("layer{l}");
            let norm_mix = b.norm(&format!("{p}.norm_mix"), d);
            let mix = match spec.conv {
                ConvType::Gcn => Mix::Gcn(b.lin(&format!("{p}.gcn"), d, d)),
                ConvType::Sage => Mix::Sage(b.lin(&format!("{p}.sage"), 2 * d, d)),
                ConvType::Lgt => Mix::Attention {
                    attn: b.attn(&format!("{p}.local"), d, d),
                    out: b.lin(&format!("{p}.local.out"), d, d),
                },
                ConvType::Ggt => Mix::Attention {
                    attn: b.attn(&format!("{p}.global"), 2 * d, d),
                    out: b.lin(&format!("{p}.global.out"), d, d),
                },
                ConvType::ResMlp => Mix::None,
            };
            let (clatt, fuse) = if spec.use_clatt && spec.conv != ConvType::ResMlp {
                let c: Vec<Attn> = spec
                    .clusterings
                    .iter()
                    .enumerate()
                    .map(|(i, tag)| b.attn(&format!("{p}.clatt{i}_{tag}"), d, d))
                    .collect();
                let f = b.lin(&format!("{p}.fuse"), d * (1 + c.len()), d);
                (c, Some(f))
            } else {
                (Vec::new(), None)
            };
            let norm_mlp = b.norm(&format!("{p}.norm_mlp"), d);
            let mlp_in = b.lin(&format!("{p}.mlp.in"), d, d);
            let mlp_out = b.lin(&format!("{p}.mlp.out"), d, d);
            blocks.push(Block {
                norm_mix,
                mix,
                clatt,
                fuse,
                norm_mlp,
                mlp_in,
                mlp_out,
            });
        }
        let norm_out = b.norm("norm_out", d);
        let head = b.lin("head", d, out_dim);
        let (names, params) = (b.names, b.tensors);
        Ok(Model {
            spec: spec.clone(),
            in_dim,
            out_dim,
            names,
            params,
            layout: Layout {
                input,
                pe,
                blocks,
                norm_out,
                head,
            },
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    /// Full-batch forward pass. Dropout is active only when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ctx: &GraphContext,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidParameter(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        if ctx.features.cols() != self.in_dim {
            return Err(Error::Shape {
                op: "model_input",
                lhs: ctx.features.shape().to_vec(),
                rhs: vec![self.in_dim],
            });
        }
        let heads = self.spec.heads;
        let p = self.spec.dropout;
        let lin = |tape: &mut Tape, x: Var, l: Lin| tape.linear(x, vars[l.w], vars[l.b]);
        let norm = |tape: &mut Tape, x: Var, n: Norm| tape.layer_norm(x, vars[n.gain], vars[n.bias], LN_EPS);
        let attn_vars = |a: &Attn| AttentionVars {
            wq: vars[a.q.w],
            bq: vars[a.q.b],
            wk: vars[a.k.w],
            bk: vars[a.k.b],
            wv: vars[a.v.w],
            bv: vars[a.v.b],
        };
        let mut drop = |tape: &mut Tape, x: Var| -> Result<Var> {
            match rng.as_deref_mut() {
                Some(r) => tape.dropout(x, p, r),
                None => Ok(x),
            }
        };

        let x = tape.constant(ctx.features.clone());
        let mut h = lin(tape, x, self.layout.input)?;
        h = drop(tape, h)?;
        let pe = match (self.layout.pe, &ctx.pe) {
            (Some(l), Some(pe)) => {
                let pv = tape.constant(pe.clone());
                Some(lin(tape, pv, l)?)
            }
            (Some(_), None) => return Err(Error::Config("model expects a positional encoding".into())),
            _ => None,
        };
        let mut records = Vec::new();
        for (layer, block) in self.layout.blocks.iter().enumerate() {
            if !matches!(block.mix, Mix::None) {
                let z = norm(tape, h, block.norm_mix)?;
                let mp = match &block.mix {
                    Mix::Gcn(l) => {
                        let a = ctx.gcn.clone().ok_or_else(|| missing("GCN adjacency"))?;
                        let s = tape.spmm(a, z)?;
                        lin(tape, s, *l)?
                    }
                    Mix::Sage(l) => {
                        let a = ctx.mean.clone().ok_or_else(|| missing("neighbor-mean adjacency"))?;
                        let s = tape.spmm(a, z)?;
                        let c = tape.concat_last(&[z, s])?;
                        lin(tape, c, *l)?
                    }
                    Mix::Attention { attn: a, out } => {
                        let (input, tables, kind) = match self.spec.conv {
                            ConvType::Ggt => {
                                let pe = pe.ok_or_else(|| missing("positional encoding"))?;
                                let c = tape.concat_last(&[z, pe])?;
                                (c, ctx.global.as_deref(), AttentionKind::Global)
                            }
                            _ => (z, ctx.local.as_deref(), AttentionKind::Local),
                        };
                        let tables = tables.ok_or_else(|| missing("attention tables"))?;
                        let (o, probs) = attention(tape, input, &attn_vars(a), tables, heads)?;
                        records.push(AttentionRecord { layer, kind, probs });
                        lin(tape, o, *out)?
                    }
                    Mix::None => unreachable!(),
                };
                let mixed = match block.fuse {
                    Some(f) => {
                        let params: Vec<AttentionVars> = block.clatt.iter().map(attn_vars).collect();
                        let (c, probs) = clatt_forward(tape, z, &ctx.clusters, &params, heads)?;
                        for (i, pr) in probs.into_iter().enumerate() {
                            records.push(AttentionRecord {
                                layer,
                                kind: AttentionKind::Cluster(i),
                                probs: pr,
                            });
                        }
                        fuse(tape, mp, c, vars[f.w], vars[f.b])?
                    }
                    None => mp,
                };
                let mixed = drop(tape, mixed)?;
                h = tape.add(h, mixed)?;
            }
            let z = norm(tape, h, block.norm_mlp)?;
            let m = lin(tape, z, block.mlp_in)?;
            let m = tape.gelu(m);
            let m = drop(tape, m)?;
            let m = lin(tape, m, block.mlp_out)?;
            let m = drop(tape, m)?;
            h = tape.add(h, m)?;
        }
        let hidden = norm(tape, h, self.layout.norm_out)?;
        let output = lin(tape, hidden, self.layout.head)?;
        Ok(Forward {
            output,
            hidden,
            attention: records,
        })
    }

    /// Evaluation-mode forward pass returning `(output, hidden)` values.
    pub fn predict(&self, ctx: &GraphContext) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let f = self.forward(&mut tape, &vars, ctx, None)?;
        Ok((tape.value(f.output).clone(), tape.value(f.hidden).clone()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let entries: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        save_checkpoint(path, &entries)
    }

    /// Loads parameters saved by [`Model::save`] for the same architecture.
    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let entries = load_checkpoint(path)?;
        if entries.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for ((name, t), (own, slot)) in entries.into_iter().zip(self.names.iter().zip(&mut self.params)) {
            if &name != own || t.shape() != slot.shape() {
                return Err(Error::Config(format!("checkpoint tensor {name} does not match {own}")));
            }
            *slot = t;
        }
        Ok(())
    }
}

fn missing(what: &str) -> Error {
    Error::Invariant(format!("graph context lacks the {what} required by the model"))
}
