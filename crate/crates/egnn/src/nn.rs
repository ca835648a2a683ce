//! The MLP blocks used by every layer: edge, coordinate, node,
//! velocity, edge-inference and radial-field functions, plus the
//! pooled readout head.
//!
//! Block shapes:
//!
//! ```text
//! edge_fn   Linear → Swish → Linear → Swish
//! coord_fn  Linear → Swish → Linear              (scalar out)
//! node_fn   Linear → Swish → Linear              (residual added by the caller)
//! vel_fn    Linear → Swish → Linear              (scalar out)
//! inf_fn    Linear → Sigmoid                     (scalar out)
//! rf_fn     Linear → Swish → Linear → Tanh       (scalar out)
//! readout   node-wise 2-layer MLP → sum pool → 2-layer MLP → scalar
//! ```

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    Sigmoid,
    Tanh,
    None,
}

/// One affine layer with its activation.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor, // [in × out]
    pub bias: Tensor,   // [out]
    pub activation: Activation,
}

/// A small MLP whose consecutive layer dimensions chain.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    EdgeFn,
    CoordFn,
    NodeFn,
    VelFn,
    InfFn,
    RfFn,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_dim: usize, hidden_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || hidden_dim == 0 || out_dim == 0 {
            return Err(Error::contract("block dimensions must be positive"));
        }
        let scalar_out = matches!(kind, BlockKind::CoordFn | BlockKind::VelFn | BlockKind::InfFn | BlockKind::RfFn);
        if scalar_out && out_dim != 1 {
            return Err(Error::Contract(format!(
                "{kind:?} must have out_dim 1, got {out_dim}"
            )));
        }
        Ok(Self {
            kind,
            in_dim,
            hidden_dim,
            out_dim,
        })
    }
}

/// Fan-in uniform initialization: weights in [−1/√in, +1/√in], biases
/// zero. The scheme is recorded in run metadata as `"fan_in_uniform"`.
/// The coordinate head's final layer is additionally scaled by
/// [`COORD_GAIN`].
pub const INIT_SCHEME: &str = "fan_in_uniform/coord_gain_1e-3";

/// Damping applied to the last linear layer of the coordinate MLP.
pub const COORD_GAIN: f64 = 1e-3;

fn init_linear(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> LinearLayer {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data: Vec<f64> = (0..in_dim * out_dim)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    LinearLayer {
        weight: Tensor::matrix(in_dim, out_dim, data).expect("consistent shape"),
        bias: Tensor::zeros(vec![out_dim]),
        activation,
    }
}

/// Build the MLP for a block spec.
pub fn build(spec: BlockSpec, rng: &mut impl Rng) -> Result<Mlp> {
    let BlockSpec {
        kind,
        in_dim,
        hidden_dim,
        out_dim,
    } = spec;
    let layers = match kind {
        BlockKind::EdgeFn => vec![
            init_linear(in_dim, hidden_dim, Activation::Swish, rng),
            init_linear(hidden_dim, out_dim, Activation::Swish, rng),
        ],
        BlockKind::CoordFn => {
            // The coordinate head starts near zero: a full-scale init
            // makes the very first coordinate updates contract every
            // point toward the centroid, which collapses the geometry
            // before the rest of the network has learned anything.
            let mut last = init_linear(hidden_dim, 1, Activation::None, rng);
            for w in last.weight.data_mut() {
                *w *= COORD_GAIN;
            }
            vec![init_linear(in_dim, hidden_dim, Activation::Swish, rng), last]
        }
        BlockKind::VelFn => vec![
            init_linear(in_dim, hidden_dim, Activation::Swish, rng),
            init_linear(hidden_dim, 1, Activation::None, rng),
        ],
        BlockKind::NodeFn => vec![
            init_linear(in_dim, hidden_dim, Activation::Swish, rng),
            init_linear(hidden_dim, out_dim, Activation::None, rng),
        ],
        BlockKind::InfFn => vec![init_linear(in_dim, 1, Activation::Sigmoid, rng)],
        BlockKind::RfFn => vec![
            init_linear(in_dim, hidden_dim, Activation::Swish, rng),
            init_linear(hidden_dim, 1, Activation::Tanh, rng),
        ],
    };
    Mlp::new(layers)
}

impl Mlp {
    pub fn new(layers: Vec<LinearLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            let out_prev = pair[0].weight.shape()[1];
            let in_next = pair[1].weight.shape()[0];
            if out_prev != in_next {
                return Err(Error::Dim {
                    op: "mlp chain",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[1]
    }

    /// Sequential affine + activation application, recorded on the
    /// tape. Parameter leaves are registered with `binder` so that
    /// gradients can be pulled back into the persistent tensors.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        binder: &mut Binder,
        prefix: &str,
    ) -> Result<NodeId> {
        let (_, cols) = tape.dims(x);
        if cols != self.in_dim() {
            return Err(Error::Dim {
                op: "mlp forward",
                lhs: vec![tape.dims(x).0, cols],
                rhs: self.layers[0].weight.shape().to_vec(),
            });
        }
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = binder.bind(tape, format!("{prefix}.layer{i}.weight"), &layer.weight)?;
            let b = binder.bind(tape, format!("{prefix}.layer{i}.bias"), &layer.bias)?;
            cur = tape.matmul(cur, w)?;
            cur = tape.add(cur, b)?;
            cur = match layer.activation {
                Activation::Swish => tape.swish(cur),
                Activation::Sigmoid => tape.sigmoid(cur),
                Activation::Tanh => tape.tanh(cur),
                Activation::None => cur,
            };
        }
        Ok(cur)
    }

    /// Evaluate on plain data without gradient bookkeeping.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let id = tape.leaf(x)?;
        let out = self.forward(&mut tape, id, &mut binder, "eval")?;
        Ok(tape.to_tensor(out))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            f(format!("{prefix}.layer{i}.weight"), &layer.weight);
            f(format!("{prefix}.layer{i}.bias"), &layer.bias);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.layer{i}.weight"), &mut layer.weight);
            f(format!("{prefix}.layer{i}.bias"), &mut layer.bias);
        }
    }
}

/// Two 2-layer MLPs around a sum pool, mapping per-node features to a
/// single scalar.
#[derive(Debug, Clone)]
pub struct ReadoutHead {
    pub pre: Mlp,
    pub post: Mlp,
}

pub fn build_readout(feature_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Result<ReadoutHead> {
    let pre = Mlp::new(vec![
        init_linear(feature_dim, hidden_dim, Activation::Swish, rng),
        init_linear(hidden_dim, hidden_dim, Activation::None, rng),
    ])?;
    let post = Mlp::new(vec![
        init_linear(hidden_dim, hidden_dim, Activation::Swish, rng),
        init_linear(hidden_dim, 1, Activation::None, rng),
    ])?;
    Ok(ReadoutHead { pre, post })
}

impl ReadoutHead {
    /// node-wise MLP → sum over nodes → MLP → scalar
    pub fn forward(
        &self,
        tape: &mut Tape,
        h: NodeId,
        binder: &mut Binder,
        prefix: &str,
    ) -> Result<NodeId> {
        let per_node = self.pre.forward(tape, h, binder, &format!("{prefix}.pre"))?;
        let pooled = tape.sum_axis(per_node, 0)?;
        self.post.forward(tape, pooled, binder, &format!("{prefix}.post"))
    }

    pub fn eval(&self, h: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let id = tape.leaf(h)?;
        let out = self.forward(&mut tape, id, &mut binder, "eval")?;
        Ok(tape.value(out)[0])
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.pre.visit_params(&format!("{prefix}.pre"), f);
        self.post.visit_params(&format!("{prefix}.post"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.pre.visit_params_mut(&format!("{prefix}.pre"), f);
        self.post.visit_params_mut(&format!("{prefix}.post"), f);
    }
}

/// Records which tape leaf each named parameter was bound to during a
/// forward pass, so gradients can be absorbed back afterwards.
#[derive(Default)]
pub struct Binder {
    entries: Vec<(String, NodeId)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> Result<NodeId> {
        let id = tape.leaf(t)?;
        self.entries.push((name, id));
        Ok(id)
    }

    pub fn entries(&self) -> &[(String, NodeId)] {
        &self.entries
    }

    /// Accumulate the tape's gradients into the named parameters of a
    /// model exposed through `visit_params_mut`.
    pub fn absorb(
        &self,
        tape: &Tape,
        visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor)),
    ) {
        let mut grads: std::collections::HashMap<&str, Vec<f64>> = std::collections::HashMap::new();
        for (name, id) in &self.entries {
            let g = tape.grad(*id);
            grads
                .entry(name.as_str())
                .and_modify(|acc| {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                })
                .or_insert_with(|| g.to_vec());
        }
        visit(&mut |name: String, t: &mut Tensor| {
            if let Some(g) = grads.get(name.as_str()) {
                t.accumulate_grad(g);
            }
        });
    }
}

/// One named parameter in a serialized model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn collect_records(visit: impl FnOnce(&mut dyn FnMut(String, &Tensor)), out: &mut Vec<ParamRecord>) {
    visit(&mut |name, t| {
        out.push(ParamRecord {
            name,
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        });
    });
}

/// Load records back by name; every record must match an existing
/// parameter with the same shape.
pub fn load_records(
    records: &[ParamRecord],
    visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor)),
) -> Result<()> {
    let mut by_name: std::collections::HashMap<&str, &ParamRecord> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut err = None;
    visit(&mut |name: String, t: &mut Tensor| {
        if err.is_some() {
            return;
        }
        match by_name.remove(name.as_str()) {
            Some(rec) => {
                if rec.shape != t.shape() || rec.values.len() != t.numel() {
                    err = Some(Error::Config(format!(
                        "parameter {name} has shape {:?}, checkpoint has {:?}",
                        t.shape(),
                        rec.shape
                    )));
                    return;
                }
                t.data_mut().copy_from_slice(&rec.values);
            }
            None => err = Some(Error::Config(format!("checkpoint missing parameter {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Config(format!(
            "checkpoint has unknown parameter {name}"
        )));
    }
    Ok(())
}
