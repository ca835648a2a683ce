//! Equivariant graph convolution layers and their message-passing
//! baselines.
//!
//! The central layer updates node features and coordinates per edge:
//!
//! ```text
//! m_ij = φ_e(h_i, h_j, ‖x_i − x_j‖², a_ij)
//! x_i' = x_i + C·Σ_{j≠i} (x_i − x_j)·φ_x(m_ij)        C = 1/(M−1)
//! m_i  = Σ_{j∈N(i)} m_ij        (or Σ_{j≠i} φ_inf(m_ij)·m_ij)
//! h_i' = φ_h(h_i, m_i) + h_i
//! ```
//!
//! The velocity variant splits the coordinate update into a velocity
//! update followed by a position step; the baselines (plain message
//! passing, radial field, continuous-filter) cover the non-equivariant
//! and invariant corners of the design space. Coordinates only ever
//! enter through squared distances and difference vectors, which is
//! what makes the h-channel invariant and the x-channel equivariant.

use crate::error::{Error, Result};
use crate::nn::{self, Binder, BlockKind, BlockSpec, Mlp, ParamRecord};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

pub use crate::nn::ReadoutHead;

/// Node features, coordinates, optional velocities, and the directed
/// edge list with optional per-edge attributes. An edge `(i, j)`
/// carries a message from sender `j` to receiver `i`.
#[derive(Debug, Clone)]
pub struct GeometricGraph {
    pub h: Tensor,
    pub x: Tensor,
    pub v: Option<Tensor>,
    pub edges: Vec<(usize, usize)>,
    pub edge_attr: Option<EdgeAttrs>,
}

#[derive(Debug, Clone)]
pub struct EdgeAttrs {
    pub dim: usize,
    pub map: HashMap<(usize, usize), Vec<f64>>,
}

impl EdgeAttrs {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            map: HashMap::new(),
        }
    }

    pub fn insert(&mut self, edge: (usize, usize), attr: Vec<f64>) {
        debug_assert_eq!(attr.len(), self.dim);
        self.map.insert(edge, attr);
    }
}

/// All M(M−1) ordered pairs, receiver-major: (0,1), (0,2), …, (1,0), …
pub fn fully_connected_edges(m: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(m.saturating_sub(1) * m);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                edges.push((i, j));
            }
        }
    }
    edges
}

impl GeometricGraph {
    pub fn new(
        h: Tensor,
        x: Tensor,
        v: Option<Tensor>,
        edges: Vec<(usize, usize)>,
        edge_attr: Option<EdgeAttrs>,
    ) -> Result<Self> {
        let g = Self {
            h,
            x,
            v,
            edges,
            edge_attr,
        };
        g.validate()?;
        Ok(g)
    }

    /// Convenience constructor with the complete ordered-pair edge
    /// list and no attributes.
    pub fn fully_connected(h: Tensor, x: Tensor, v: Option<Tensor>) -> Result<Self> {
        let m = x.dims2()?.0;
        Self::new(h, x, v, fully_connected_edges(m), None)
    }

    pub fn num_nodes(&self) -> usize {
        self.x.dims2().expect("validated").0
    }

    pub fn coord_dim(&self) -> usize {
        self.x.dims2().expect("validated").1
    }

    pub fn validate(&self) -> Result<()> {
        let (m, _) = self.x.dims2()?;
        let (hm, _) = self.h.dims2()?;
        if hm != m {
            return Err(Error::Dim {
                op: "graph",
                lhs: self.h.shape().to_vec(),
                rhs: self.x.shape().to_vec(),
            });
        }
        if let Some(v) = &self.v {
            if v.dims2()? != self.x.dims2()? {
                return Err(Error::Dim {
                    op: "graph velocities",
                    lhs: v.shape().to_vec(),
                    rhs: self.x.shape().to_vec(),
                });
            }
        }
        for &(i, j) in &self.edges {
            if i == j {
                return Err(Error::Contract(format!("self-loop at node {i}")));
            }
            if i >= m || j >= m {
                return Err(Error::Contract(format!(
                    "edge ({i}, {j}) out of range for {m} nodes"
                )));
            }
        }
        if let Some(attrs) = &self.edge_attr {
            for edge in &self.edges {
                match attrs.map.get(edge) {
                    None => {
                        return Err(Error::Contract(format!(
                            "missing edge attribute for edge {edge:?}"
                        )))
                    }
                    Some(a) if a.len() != attrs.dim => {
                        return Err(Error::Contract(format!(
                            "edge attribute for {edge:?} has length {}, expected {}",
                            a.len(),
                            attrs.dim
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn is_fully_connected(&self) -> bool {
        let m = self.num_nodes();
        if self.edges.len() != m * m.saturating_sub(1) {
            return false;
        }
        let set: HashSet<(usize, usize)> = self.edges.iter().copied().collect();
        set.len() == self.edges.len()
    }

    /// Relabel nodes: node i of the result is node `perm[i]` of self.
    /// Edges and attributes move consistently, preserving list order.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.num_nodes();
        if perm.len() != m {
            return Err(Error::contract("permutation length mismatch"));
        }
        let mut inverse = vec![0usize; m];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let take_rows = |t: &Tensor| -> Tensor {
            Tensor::from_rows(
                &perm
                    .iter()
                    .map(|&old| t.row_slice(old).to_vec())
                    .collect::<Vec<_>>(),
            )
            .expect("consistent rows")
        };
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(i, j)| (inverse[i], inverse[j]))
            .collect();
        let edge_attr = self.edge_attr.as_ref().map(|attrs| {
            let mut moved = EdgeAttrs::new(attrs.dim);
            for (&(i, j), a) in &attrs.map {
                moved.insert((inverse[i], inverse[j]), a.clone());
            }
            moved
        });
        GeometricGraph::new(
            take_rows(&self.h),
            take_rows(&self.x),
            self.v.as_ref().map(&take_rows),
            edges,
            edge_attr,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Egnn,
    EgnnVelocity,
    Gnn,
    RadialField,
    SchnetInvariant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub coord_dim: usize,
    #[serde(default)]
    pub attr_dim: usize,
    #[serde(default)]
    pub use_soft_edges: bool,
    #[serde(default = "default_true")]
    pub update_coords: bool,
    /// Restrict the coordinate sum to the explicit edge list instead
    /// of demanding all ordered pairs.
    #[serde(default)]
    pub restrict_to_edges: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.coord_dim == 0 {
            return Err(Error::config("hidden_dim and coord_dim must be positive"));
        }
        if self.kind == ModelKind::EgnnVelocity && !self.update_coords {
            return Err(Error::config("egnn_velocity requires update_coords = true"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EgclParams {
    pub edge_fn: Mlp,
    pub coord_fn: Mlp,
    pub node_fn: Mlp,
    pub vel_fn: Option<Mlp>,
    pub inf_fn: Option<Mlp>,
}

#[derive(Debug, Clone)]
pub struct GnnParams {
    pub edge_fn: Mlp,
    pub node_fn: Mlp,
    pub inf_fn: Option<Mlp>,
}

#[derive(Debug, Clone)]
pub struct RadialFieldParams {
    pub rf_fn: Mlp,
}

#[derive(Debug, Clone)]
pub struct SchnetParams {
    pub cf_fn: Mlp,
    pub s_fn: Mlp,
    pub node_fn: Mlp,
}

#[derive(Debug, Clone)]
pub enum LayerParams {
    Egcl(EgclParams),
    Gnn(GnnParams),
    RadialField(RadialFieldParams),
    Schnet(SchnetParams),
}

impl LayerParams {
    fn build(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let nf = cfg.hidden_dim;
        let a = cfg.attr_dim;
        Ok(match cfg.kind {
            ModelKind::Egnn | ModelKind::EgnnVelocity => LayerParams::Egcl(EgclParams {
                edge_fn: nn::build(BlockSpec::new(BlockKind::EdgeFn, 2 * nf + 1 + a, nf, nf)?, rng)?,
                coord_fn: nn::build(BlockSpec::new(BlockKind::CoordFn, nf, nf, 1)?, rng)?,
                node_fn: nn::build(BlockSpec::new(BlockKind::NodeFn, 2 * nf, nf, nf)?, rng)?,
                vel_fn: if cfg.kind == ModelKind::EgnnVelocity {
                    Some(nn::build(BlockSpec::new(BlockKind::VelFn, nf, nf, 1)?, rng)?)
                } else {
                    None
                },
                inf_fn: if cfg.use_soft_edges {
                    Some(nn::build(BlockSpec::new(BlockKind::InfFn, nf, nf, 1)?, rng)?)
                } else {
                    None
                },
            }),
            ModelKind::Gnn => LayerParams::Gnn(GnnParams {
                edge_fn: nn::build(BlockSpec::new(BlockKind::EdgeFn, 2 * nf + a, nf, nf)?, rng)?,
                node_fn: nn::build(BlockSpec::new(BlockKind::NodeFn, 2 * nf, nf, nf)?, rng)?,
                inf_fn: if cfg.use_soft_edges {
                    Some(nn::build(BlockSpec::new(BlockKind::InfFn, nf, nf, 1)?, rng)?)
                } else {
                    None
                },
            }),
            ModelKind::RadialField => LayerParams::RadialField(RadialFieldParams {
                rf_fn: nn::build(BlockSpec::new(BlockKind::RfFn, 1 + a, nf, 1)?, rng)?,
            }),
            ModelKind::SchnetInvariant => LayerParams::Schnet(SchnetParams {
                cf_fn: nn::build(BlockSpec::new(BlockKind::EdgeFn, 1, nf, nf)?, rng)?,
                s_fn: nn::build(BlockSpec::new(BlockKind::NodeFn, nf, nf, nf)?, rng)?,
                node_fn: nn::build(BlockSpec::new(BlockKind::NodeFn, 2 * nf, nf, nf)?, rng)?,
            }),
        })
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            LayerParams::Egcl(p) => {
                p.edge_fn.visit_params(&format!("{prefix}.edge_fn"), f);
                p.coord_fn.visit_params(&format!("{prefix}.coord_fn"), f);
                p.node_fn.visit_params(&format!("{prefix}.node_fn"), f);
                if let Some(v) = &p.vel_fn {
                    v.visit_params(&format!("{prefix}.vel_fn"), f);
                }
                if let Some(i) = &p.inf_fn {
                    i.visit_params(&format!("{prefix}.inf_fn"), f);
                }
            }
            LayerParams::Gnn(p) => {
                p.edge_fn.visit_params(&format!("{prefix}.edge_fn"), f);
                p.node_fn.visit_params(&format!("{prefix}.node_fn"), f);
                if let Some(i) = &p.inf_fn {
                    i.visit_params(&format!("{prefix}.inf_fn"), f);
                }
            }
            LayerParams::RadialField(p) => p.rf_fn.visit_params(&format!("{prefix}.rf_fn"), f),
            LayerParams::Schnet(p) => {
                p.cf_fn.visit_params(&format!("{prefix}.cf_fn"), f);
                p.s_fn.visit_params(&format!("{prefix}.s_fn"), f);
                p.node_fn.visit_params(&format!("{prefix}.node_fn"), f);
            }
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            LayerParams::Egcl(p) => {
                p.edge_fn.visit_params_mut(&format!("{prefix}.edge_fn"), f);
                p.coord_fn.visit_params_mut(&format!("{prefix}.coord_fn"), f);
                p.node_fn.visit_params_mut(&format!("{prefix}.node_fn"), f);
                if let Some(v) = &mut p.vel_fn {
                    v.visit_params_mut(&format!("{prefix}.vel_fn"), f);
                }
                if let Some(i) = &mut p.inf_fn {
                    i.visit_params_mut(&format!("{prefix}.inf_fn"), f);
                }
            }
            LayerParams::Gnn(p) => {
                p.edge_fn.visit_params_mut(&format!("{prefix}.edge_fn"), f);
                p.node_fn.visit_params_mut(&format!("{prefix}.node_fn"), f);
                if let Some(i) = &mut p.inf_fn {
                    i.visit_params_mut(&format!("{prefix}.inf_fn"), f);
                }
            }
            LayerParams::RadialField(p) => p.rf_fn.visit_params_mut(&format!("{prefix}.rf_fn"), f),
            LayerParams::Schnet(p) => {
                p.cf_fn.visit_params_mut(&format!("{prefix}.cf_fn"), f);
                p.s_fn.visit_params_mut(&format!("{prefix}.s_fn"), f);
                p.node_fn.visit_params_mut(&format!("{prefix}.node_fn"), f);
            }
        }
    }
}

/// A stack of layers of one kind.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
}

/// Tape handles for a graph state mid-forward.
#[derive(Debug, Clone, Copy)]
pub struct TracedGraph {
    pub h: NodeId,
    pub x: NodeId,
    pub v: Option<NodeId>,
}

/// Edge bookkeeping shared by every layer of one forward pass.
pub struct GraphCtx {
    pub num_nodes: usize,
    pub recv: Vec<usize>,
    pub send: Vec<usize>,
    pub attr: Option<NodeId>,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams::build(&config, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&format!("layers.{i}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&format!("layers.{i}"), f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }

    /// Validate graph/config compatibility and set up the edge
    /// bookkeeping leaves on the tape. Feature width is checked later
    /// in [`Model::forward_from`], since callers may build h⁰ on the
    /// tape (e.g. through a learned embedding).
    pub fn graph_ctx(&self, tape: &mut Tape, g: &GeometricGraph) -> Result<GraphCtx> {
        g.validate()?;
        let cfg = &self.config;
        let m = g.num_nodes();
        if g.coord_dim() != cfg.coord_dim {
            return Err(Error::Dim {
                op: "model coordinates",
                lhs: vec![m, g.coord_dim()],
                rhs: vec![m, cfg.coord_dim],
            });
        }
        let moves_coords = cfg.update_coords
            && matches!(cfg.kind, ModelKind::Egnn | ModelKind::EgnnVelocity)
            || cfg.kind == ModelKind::RadialField;
        if moves_coords && m < 2 && !self.layers.is_empty() {
            return Err(Error::contract(
                "coordinate updates need at least 2 nodes (C = 1/(M-1))",
            ));
        }
        let needs_all_pairs = !cfg.restrict_to_edges
            && !self.layers.is_empty()
            && (moves_coords || cfg.use_soft_edges);
        if needs_all_pairs && !g.is_fully_connected() {
            return Err(Error::contract(
                "coordinate and soft-edge sums run over all ordered pairs; \
                 provide the complete edge list or set restrict_to_edges",
            ));
        }
        if cfg.kind == ModelKind::EgnnVelocity && g.v.is_none() {
            return Err(Error::contract("velocity model requires graph velocities"));
        }
        if cfg.attr_dim > 0 && g.edge_attr.is_none() {
            return Err(Error::contract(
                "model expects edge attributes but the graph has none",
            ));
        }
        if let Some(attrs) = &g.edge_attr {
            if cfg.attr_dim != attrs.dim {
                return Err(Error::Dim {
                    op: "edge attributes",
                    lhs: vec![attrs.dim],
                    rhs: vec![cfg.attr_dim],
                });
            }
        }

        let recv: Vec<usize> = g.edges.iter().map(|&(i, _)| i).collect();
        let send: Vec<usize> = g.edges.iter().map(|&(_, j)| j).collect();
        let attr = match (&g.edge_attr, cfg.attr_dim) {
            (Some(attrs), dim) if dim > 0 => {
                let mut data = Vec::with_capacity(g.edges.len() * dim);
                for edge in &g.edges {
                    data.extend_from_slice(&attrs.map[edge]);
                }
                Some(tape.leaf_matrix(g.edges.len(), dim, data)?)
            }
            _ => None,
        };
        Ok(GraphCtx {
            num_nodes: m,
            recv,
            send,
            attr,
        })
    }

    /// Run the layer stack from tape-resident state. The state may
    /// come from leaves of a graph or from upstream computation such
    /// as an input embedding.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        state: TracedGraph,
        ctx: &GraphCtx,
        binder: &mut Binder,
    ) -> Result<TracedGraph> {
        if !self.layers.is_empty() {
            let (h_rows, h_cols) = tape.dims(state.h);
            if h_rows != ctx.num_nodes || h_cols != self.config.hidden_dim {
                return Err(Error::Dim {
                    op: "model features",
                    lhs: vec![h_rows, h_cols],
                    rhs: vec![ctx.num_nodes, self.config.hidden_dim],
                });
            }
            if self.config.kind == ModelKind::EgnnVelocity && state.v.is_none() {
                return Err(Error::contract("velocity model requires a velocity channel"));
            }
        }
        let mut state = state;
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = format!("layers.{i}");
            state = match layer {
                LayerParams::Egcl(p) => {
                    egcl_layer(tape, binder, &prefix, p, &self.config, state, ctx)?
                }
                LayerParams::Gnn(p) => {
                    gnn_layer(tape, binder, &prefix, p, &self.config, state, ctx)?
                }
                LayerParams::RadialField(p) => {
                    radial_field_layer(tape, binder, &prefix, p, state, ctx)?
                }
                LayerParams::Schnet(p) => schnet_layer(tape, binder, &prefix, p, state, ctx)?,
            };
        }
        Ok(state)
    }

    /// Run the whole stack on a tape, binding parameters for gradient
    /// absorption.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        g: &GeometricGraph,
        binder: &mut Binder,
    ) -> Result<TracedGraph> {
        let ctx = self.graph_ctx(tape, g)?;
        let state = TracedGraph {
            h: tape.leaf(&g.h)?,
            x: tape.leaf(&g.x)?,
            v: match &g.v {
                Some(v) => Some(tape.leaf(v)?),
                None => None,
            },
        };
        self.forward_from(tape, state, &ctx, binder)
    }

    /// Plain forward pass on a private tape.
    pub fn forward(&self, g: &GeometricGraph) -> Result<GeometricGraph> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let out = self.forward_traced(&mut tape, g, &mut binder)?;
        Ok(GeometricGraph {
            h: tape.to_tensor(out.h),
            x: tape.to_tensor(out.x),
            v: out.v.map(|v| tape.to_tensor(v)),
            edges: g.edges.clone(),
            edge_attr: g.edge_attr.clone(),
        })
    }

    pub fn to_checkpoint(&self, rng_seed: u64) -> Checkpoint {
        let mut blocks = Vec::new();
        nn::collect_records(|f| self.visit_params(f), &mut blocks);
        Checkpoint {
            config: self.config.clone(),
            blocks,
            rng_seed,
        }
    }

    /// Rebuild the core model from a checkpoint. Records outside the
    /// layer stack (input embeddings, heads, decoder scalars written
    /// by training runs) are ignored here.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut rng = crate::rng::substream(ckpt.rng_seed, "checkpoint-skeleton");
        let mut model = Model::new(ckpt.config.clone(), &mut rng)?;
        let layer_records: Vec<ParamRecord> = ckpt
            .blocks
            .iter()
            .filter(|r| r.name.starts_with("layers."))
            .cloned()
            .collect();
        nn::load_records(&layer_records, |f| model.visit_params_mut(f))?;
        Ok(model)
    }
}

/// Serialized model: config, flat parameter records, and the seed the
/// run was started from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub blocks: Vec<ParamRecord>,
    pub rng_seed: u64,
}

/// Messages for one layer: φ_e applied per edge to
/// (h_i, h_j, ‖x_i−x_j‖², a_ij). Also returns the difference vectors
/// for the coordinate update.
fn edge_messages(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    edge_fn: &Mlp,
    state: &TracedGraph,
    ctx: &GraphCtx,
    with_distance: bool,
) -> Result<(NodeId, NodeId)> {
    let hi = tape.gather_rows(state.h, &ctx.recv)?;
    let hj = tape.gather_rows(state.h, &ctx.send)?;
    let xi = tape.gather_rows(state.x, &ctx.recv)?;
    let xj = tape.gather_rows(state.x, &ctx.send)?;
    let diff = tape.sub(xi, xj)?;
    let mut parts = vec![hi, hj];
    if with_distance {
        let sq = tape.square(diff);
        let d2 = tape.sum_axis(sq, 1)?;
        parts.push(d2);
    }
    if let Some(attr) = ctx.attr {
        parts.push(attr);
    }
    let edge_in = tape.concat_cols(&parts)?;
    let messages = edge_fn.forward(tape, edge_in, binder, &format!("{prefix}.edge_fn"))?;
    Ok((messages, diff))
}

/// Per-node message aggregation, optionally soft-weighted by φ_inf(m_ij).
fn aggregate_messages(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    inf_fn: Option<&Mlp>,
    messages: NodeId,
    ctx: &GraphCtx,
) -> Result<NodeId> {
    let weighted = match inf_fn {
        Some(inf) => {
            let e = inf.forward(tape, messages, binder, &format!("{prefix}.inf_fn"))?;
            tape.mul(messages, e)?
        }
        None => messages,
    };
    tape.segment_sum(weighted, &ctx.recv, ctx.num_nodes)
}

/// φ_h(h, m) plus the residual.
fn node_update(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    node_fn: &Mlp,
    h: NodeId,
    agg: NodeId,
    residual: bool,
) -> Result<NodeId> {
    let node_in = tape.concat_cols(&[h, agg])?;
    let out = node_fn.forward(tape, node_in, binder, &format!("{prefix}.node_fn"))?;
    if residual {
        tape.add(out, h)
    } else {
        Ok(out)
    }
}

/// The coordinate-update term C·Σ_{j≠i} (x_i − x_j)·φ_x(m_ij).
fn coord_update_term(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    coord_fn: &Mlp,
    messages: NodeId,
    diff: NodeId,
    ctx: &GraphCtx,
) -> Result<NodeId> {
    let weights = coord_fn.forward(tape, messages, binder, &format!("{prefix}.coord_fn"))?;
    let weighted = tape.mul(diff, weights)?;
    let summed = tape.segment_sum(weighted, &ctx.recv, ctx.num_nodes)?;
    let c = 1.0 / (ctx.num_nodes as f64 - 1.0);
    Ok(tape.scale(summed, c))
}

/// One equivariant layer (plain or velocity form depending on the
/// params and state).
pub fn egcl_layer(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    params: &EgclParams,
    cfg: &ModelConfig,
    state: TracedGraph,
    ctx: &GraphCtx,
) -> Result<TracedGraph> {
    let (messages, diff) = edge_messages(tape, binder, prefix, &params.edge_fn, &state, ctx, true)?;

    let (x_next, v_next) = if cfg.update_coords {
        let term = coord_update_term(tape, binder, prefix, &params.coord_fn, messages, diff, ctx)?;
        match (&params.vel_fn, state.v) {
            (Some(vel_fn), Some(v)) => {
                // v' = φ_v(h)·v + C·Σ(x_i − x_j)·φ_x(m_ij);  x' = x + v'
                let scale = vel_fn.forward(tape, state.h, binder, &format!("{prefix}.vel_fn"))?;
                let damped = tape.mul(v, scale)?;
                let v_next = tape.add(damped, term)?;
                let x_next = tape.add(state.x, v_next)?;
                (x_next, Some(v_next))
            }
            (Some(_), None) => {
                return Err(Error::contract("velocity layer applied to graph without v"))
            }
            (None, v) => (tape.add(state.x, term)?, v),
        }
    } else {
        (state.x, state.v)
    };

    let agg = aggregate_messages(tape, binder, prefix, params.inf_fn.as_ref(), messages, ctx)?;
    let h_next = node_update(tape, binder, prefix, &params.node_fn, state.h, agg, true)?;
    Ok(TracedGraph {
        h: h_next,
        x: x_next,
        v: v_next,
    })
}

/// Plain message passing: distances never enter, coordinates pass
/// through untouched.
pub fn gnn_layer(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    params: &GnnParams,
    _cfg: &ModelConfig,
    state: TracedGraph,
    ctx: &GraphCtx,
) -> Result<TracedGraph> {
    let hi = tape.gather_rows(state.h, &ctx.recv)?;
    let hj = tape.gather_rows(state.h, &ctx.send)?;
    let mut parts = vec![hi, hj];
    if let Some(attr) = ctx.attr {
        parts.push(attr);
    }
    let edge_in = tape.concat_cols(&parts)?;
    let messages = params
        .edge_fn
        .forward(tape, edge_in, binder, &format!("{prefix}.edge_fn"))?;
    let agg = aggregate_messages(tape, binder, prefix, params.inf_fn.as_ref(), messages, ctx)?;
    let h_next = node_update(tape, binder, prefix, &params.node_fn, state.h, agg, true)?;
    Ok(TracedGraph {
        h: h_next,
        x: state.x,
        v: state.v,
    })
}

/// x' = x + Σ_{j≠i} φ_rf(‖x_i−x_j‖, a_ij)·(x_i − x_j); features pass
/// through.
pub fn radial_field_layer(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    params: &RadialFieldParams,
    state: TracedGraph,
    ctx: &GraphCtx,
) -> Result<TracedGraph> {
    let xi = tape.gather_rows(state.x, &ctx.recv)?;
    let xj = tape.gather_rows(state.x, &ctx.send)?;
    let diff = tape.sub(xi, xj)?;
    let sq = tape.square(diff);
    let d2 = tape.sum_axis(sq, 1)?;
    let norm = tape.sqrt(d2);
    let mut parts = vec![norm];
    if let Some(attr) = ctx.attr {
        parts.push(attr);
    }
    let rf_in = tape.concat_cols(&parts)?;
    let weights = params
        .rf_fn
        .forward(tape, rf_in, binder, &format!("{prefix}.rf_fn"))?;
    let weighted = tape.mul(diff, weights)?;
    let summed = tape.segment_sum(weighted, &ctx.recv, ctx.num_nodes)?;
    let x_next = tape.add(state.x, summed)?;
    Ok(TracedGraph {
        h: state.h,
        x: x_next,
        v: state.v,
    })
}

/// Continuous-filter layer: m_ij = φ_cf(‖r_ij‖) ∘ φ_s(h_j); h updates,
/// x never moves, so the feature channel is E(n)-invariant.
pub fn schnet_layer(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    params: &SchnetParams,
    state: TracedGraph,
    ctx: &GraphCtx,
) -> Result<TracedGraph> {
    let xi = tape.gather_rows(state.x, &ctx.recv)?;
    let xj = tape.gather_rows(state.x, &ctx.send)?;
    let diff = tape.sub(xi, xj)?;
    let sq = tape.square(diff);
    let d2 = tape.sum_axis(sq, 1)?;
    let norm = tape.sqrt(d2);
    let cf = params
        .cf_fn
        .forward(tape, norm, binder, &format!("{prefix}.cf_fn"))?;
    let hj = tape.gather_rows(state.h, &ctx.send)?;
    let s = params
        .s_fn
        .forward(tape, hj, binder, &format!("{prefix}.s_fn"))?;
    let messages = tape.mul(cf, s)?;
    let agg = tape.segment_sum(messages, &ctx.recv, ctx.num_nodes)?;
    let h_next = node_update(tape, binder, prefix, &params.node_fn, state.h, agg, false)?;
    Ok(TracedGraph {
        h: h_next,
        x: state.x,
        v: state.v,
    })
}

fn single_layer_model(params: LayerParams, cfg: &ModelConfig) -> Model {
    let mut config = cfg.clone();
    config.num_layers = 1;
    Model {
        config,
        layers: vec![params],
    }
}

/// One equivariant layer applied to a graph.
pub fn egcl_forward(g: &GeometricGraph, params: &EgclParams, cfg: &ModelConfig) -> Result<GeometricGraph> {
    let mut p = params.clone();
    p.vel_fn = None;
    single_layer_model(LayerParams::Egcl(p), cfg).forward(g)
}

/// One velocity-form equivariant layer.
pub fn egcl_velocity_forward(
    g: &GeometricGraph,
    params: &EgclParams,
    cfg: &ModelConfig,
) -> Result<GeometricGraph> {
    if g.v.is_none() {
        return Err(Error::contract("velocity layer applied to graph without v"));
    }
    if params.vel_fn.is_none() {
        return Err(Error::contract("velocity layer requires vel_fn"));
    }
    single_layer_model(LayerParams::Egcl(params.clone()), cfg).forward(g)
}

/// One plain message-passing layer.
pub fn gnn_forward(g: &GeometricGraph, params: &GnnParams, cfg: &ModelConfig) -> Result<GeometricGraph> {
    single_layer_model(LayerParams::Gnn(params.clone()), cfg).forward(g)
}

/// One radial-field layer.
pub fn radial_field_forward(
    g: &GeometricGraph,
    params: &RadialFieldParams,
    cfg: &ModelConfig,
) -> Result<GeometricGraph> {
    if g.num_nodes() < 2 {
        return Err(Error::contract("radial field needs at least 2 nodes"));
    }
    single_layer_model(LayerParams::RadialField(params.clone()), cfg).forward(g)
}

/// One continuous-filter layer.
pub fn schnet_forward(
    g: &GeometricGraph,
    params: &SchnetParams,
    cfg: &ModelConfig,
) -> Result<GeometricGraph> {
    single_layer_model(LayerParams::Schnet(params.clone()), cfg).forward(g)
}

/// The full stack.
pub fn model_forward(model: &Model, g: &GeometricGraph) -> Result<GeometricGraph> {
    model.forward(g)
}

/// Σ_j weights_j · m_ij with precomputed weights, accumulated in
/// receiver-major pair order.
pub fn weighted_aggregate(
    messages: &HashMap<(usize, usize), Tensor>,
    weights: &HashMap<(usize, usize), f64>,
    num_nodes: usize,
) -> Result<Tensor> {
    let dim = messages
        .values()
        .next()
        .map(Tensor::numel)
        .ok_or_else(|| Error::contract("no messages to aggregate"))?;
    let mut out = vec![0.0; num_nodes * dim];
    for i in 0..num_nodes {
        for j in 0..num_nodes {
            if i == j {
                continue;
            }
            let m = messages.get(&(i, j)).ok_or_else(|| {
                Error::Contract(format!("missing message for ordered pair ({i}, {j})"))
            })?;
            let w = weights
                .get(&(i, j))
                .copied()
                .ok_or_else(|| Error::Contract(format!("missing weight for pair ({i}, {j})")))?;
            for (o, v) in out[i * dim..(i + 1) * dim].iter_mut().zip(m.data()) {
                *o += w * v;
            }
        }
    }
    Tensor::matrix(num_nodes, dim, out)
}

/// m_i = Σ_{j≠i} φ_inf(m_ij)·m_ij over all ordered pairs.
pub fn soft_edge_aggregate(
    messages: &HashMap<(usize, usize), Tensor>,
    inf_fn: &Mlp,
    num_nodes: usize,
) -> Result<Tensor> {
    let mut weights = HashMap::new();
    for (&pair, m) in messages {
        let input = Tensor::matrix(1, m.numel(), m.data().to_vec())?;
        weights.insert(pair, inf_fn.eval(&input)?.data()[0]);
    }
    weighted_aggregate(messages, &weights, num_nodes)
}

/// Â_ij = 1/(1 + exp(w‖z_i−z_j‖² + b)). The diagonal is reported but
/// carries no training signal.
pub fn decode_adjacency(z: &Tensor, w: f64, b: f64) -> Result<Tensor> {
    let (m, n) = z.dims2()?;
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let mut d2 = 0.0;
            for c in 0..n {
                let diff = z.get(i, c) - z.get(j, c);
                d2 += diff * diff;
            }
            out[i * m + j] = 1.0 / (1.0 + (w * d2 + b).exp());
        }
    }
    Tensor::matrix(m, m, out)
}

/// Traced decoder logits over all M² ordered pairs (diagonal
/// included, row-major): an [M²×1] column of ℓ_ij = −(w‖z_i−z_j‖²+b),
/// so Â = sigmoid(ℓ).
pub fn decode_adjacency_logits_traced(
    tape: &mut Tape,
    z: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let (m, _) = tape.dims(z);
    let mut idx_i = Vec::with_capacity(m * m);
    let mut idx_j = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            idx_i.push(i);
            idx_j.push(j);
        }
    }
    let zi = tape.gather_rows(z, &idx_i)?;
    let zj = tape.gather_rows(z, &idx_j)?;
    let diff = tape.sub(zi, zj)?;
    let sq = tape.square(diff);
    let d2 = tape.sum_axis(sq, 1)?;
    let wd = tape.mul(d2, w)?;
    let arg = tape.add(wd, b)?;
    Ok(tape.scale(arg, -1.0))
}

/// Traced decoder over all M² ordered pairs (diagonal included,
/// row-major), returning an [M²×1] column of probabilities.
pub fn decode_adjacency_traced(
    tape: &mut Tape,
    z: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let logits = decode_adjacency_logits_traced(tape, z, w, b)?;
    Ok(tape.sigmoid(logits))
}

/// Pooled scalar readout of final node features.
pub fn readout(head: &ReadoutHead, h: &Tensor) -> Result<f64> {
    head.eval(h)
}
