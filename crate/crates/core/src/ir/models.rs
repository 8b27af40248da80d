//! Builders for the supported GNN families, in their naive form: composite
//! operators are kept and no algebraic rewriting has happened yet.

use serde::{Deserialize, Serialize};

use super::{ApplyFn, Class, IrBuilder, IrGraph, NodeId, Operand, Phase, Reduce, ScatterFn};
use crate::error::{Error, Result};
use crate::graph::{Dir, Graph};
use crate::ir::Act;
use crate::tensor::{Elementwise, Init, ParamTensor, Tensor, DEFAULT_LEAKY_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gcn,
    Gat,
    EdgeConv,
    MoNet,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Self::Gcn),
            "gat" => Ok(Self::Gat),
            "edgeconv" | "ec" => Ok(Self::EdgeConv),
            "monet" => Ok(Self::MoNet),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layers: usize,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// Attention heads (GAT only).
    pub heads: usize,
    /// Gaussian kernels (MoNet only).
    pub kernels: usize,
    /// Pseudo-coordinate width (MoNet only).
    pub pseudo_dim: usize,
    pub leaky_slope: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            kind,
            layers: 2,
            in_dim,
            hidden,
            out_dim,
            heads: 1,
            kernels: 2,
            pseudo_dim: 2,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    fn check(&self) -> Result<()> {
        if self.layers == 0 || self.in_dim == 0 || self.hidden == 0 || self.out_dim == 0 {
            return Err(Error::Config("layers and feature widths must be positive".into()));
        }
        if self.heads == 0 || self.kernels == 0 || self.pseudo_dim == 0 {
            return Err(Error::Config("heads, kernels and pseudo_dim must be positive".into()));
        }
        if self.leaky_slope <= 0.0 {
            return Err(Error::Config("leaky slope must be positive".into()));
        }
        Ok(())
    }

    /// Per-layer output widths (per head for GAT).
    fn widths(&self) -> Vec<usize> {
        (0..self.layers).map(|l| if l + 1 == self.layers { self.out_dim } else { self.hidden }).collect()
    }
}

/// A model graph plus its initial parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub ir: IrGraph,
    pub params: Vec<ParamTensor>,
}

pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.check()?;
    let mut b = IrBuilder::new(Phase::Forward);
    let x = b.input("x", Class::Vertex, spec.in_dim);
    let out = match spec.kind {
        ModelKind::Gcn => gcn(&mut b, spec, x)?,
        ModelKind::Gat => gat(&mut b, spec, x)?,
        ModelKind::EdgeConv => edge_conv(&mut b, spec, x)?,
        ModelKind::MoNet => monet(&mut b, spec, x)?,
    };
    let ir = b.finish(vec![out])?;
    let params = init_params(&ir, seed);
    Ok(Model { spec: spec.clone(), ir, params })
}

/// Seeded initial values: inverse bandwidths start at one, the rest uniform.
pub fn init_params(ir: &IrGraph, seed: u64) -> Vec<ParamTensor> {
    ir.params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let init = if p.name.ends_with("inv_sigma") { Init::Ones } else { Init::Uniform };
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            ParamTensor::new(p.name.clone(), Tensor::init_seeded(p.rows, p.cols, s, init))
        })
        .collect()
}

fn gcn(b: &mut IrBuilder, spec: &ModelSpec, x: NodeId) -> Result<NodeId> {
    let ew = b.input("edge_weight", Class::Edge, 1);
    let mut h = x;
    let mut d_in = spec.in_dim;
    for (l, d_out) in spec.widths().into_iter().enumerate() {
        let w = b.param(format!("l{l}.weight"), d_in, d_out);
        let bias = b.param(format!("l{l}.bias"), 1, d_out);
        b.set_tag(Some("projection"));
        let p = b.apply_vertex(ApplyFn::Linear(w), &[h])?;
        b.set_tag(Some("aggregation"));
        let m = b.scatter(ScatterFn::CopyU, 1, &[p])?;
        let mw = b.apply_edge(ApplyFn::MulHeads { heads: 1 }, &[Operand::direct(m), Operand::direct(ew)])?;
        let s = b.gather(Reduce::Sum, Dir::Dst, mw)?;
        b.set_tag(None);
        h = b.apply_vertex(ApplyFn::BiasAct { bias, act: Some(Act::Relu) }, &[s])?;
        d_in = d_out;
    }
    Ok(h)
}

fn gat(b: &mut IrBuilder, spec: &ModelSpec, x: NodeId) -> Result<NodeId> {
    let heads = spec.heads;
    let widths = spec.widths();
    let mut h = x;
    let mut d_in = spec.in_dim;
    for (l, &f) in widths.iter().enumerate() {
        let w = b.param(format!("l{l}.weight"), d_in, heads * f);
        let a = b.param(format!("l{l}.attn"), heads, 2 * f);
        b.set_tag(Some("projection"));
        let hp = b.apply_vertex(ApplyFn::Linear(w), &[h])?;
        b.set_tag(Some("attention"));
        let cat = b.scatter(ScatterFn::UConcatV, heads, &[hp, hp])?;
        let score = b.apply_edge(ApplyFn::HeadDot { p: a, heads }, &[Operand::direct(cat)])?;
        let m = b.apply_edge(ApplyFn::Elem(Elementwise::LeakyRelu(spec.leaky_slope)), &[Operand::direct(score)])?;
        b.set_tag(Some("softmax"));
        let alpha = b.edge_softmax(Dir::Dst, m)?;
        b.set_tag(Some("aggregation"));
        let agg = b.aggregate(
            ScatterFn::CopyU,
            heads,
            &[hp],
            Some(ApplyFn::MulHeads { heads }),
            &[alpha],
            Reduce::Sum,
            Dir::Dst,
        )?;
        b.set_tag(None);
        h = if l + 1 < widths.len() { b.apply_vertex(ApplyFn::Elem(Elementwise::Relu), &[agg])? } else { agg };
        d_in = heads * f;
    }
    Ok(h)
}

fn edge_conv(b: &mut IrBuilder, spec: &ModelSpec, x: NodeId) -> Result<NodeId> {
    let widths = spec.widths();
    let mut h = x;
    let mut d_in = spec.in_dim;
    for (l, &d_out) in widths.iter().enumerate() {
        let theta = b.param(format!("l{l}.theta"), d_in, d_out);
        let phi = b.param(format!("l{l}.phi"), d_in, d_out);
        b.set_tag(Some("message"));
        let diff = b.scatter(ScatterFn::USubV, 1, &[h, h])?;
        let t = b.apply_edge(ApplyFn::Linear(theta), &[Operand::direct(diff)])?;
        b.set_tag(Some("projection"));
        let p = b.apply_vertex(ApplyFn::Linear(phi), &[h])?;
        b.set_tag(Some("message"));
        let q = b.apply_edge(ApplyFn::Elem(Elementwise::Add), &[Operand::direct(t), Operand::dst(p)])?;
        b.set_tag(Some("aggregation"));
        let g = b.gather(Reduce::Max, Dir::Dst, q)?;
        b.set_tag(None);
        h = if l + 1 < widths.len() { b.apply_vertex(ApplyFn::Elem(Elementwise::Relu), &[g])? } else { g };
        d_in = d_out;
    }
    Ok(h)
}

fn monet(b: &mut IrBuilder, spec: &ModelSpec, x: NodeId) -> Result<NodeId> {
    let k = spec.kernels;
    let r = spec.pseudo_dim;
    let widths = spec.widths();
    let proj = b.param("pseudo.weight", 2 * spec.in_dim, r);
    b.set_tag(Some("pseudo"));
    let cat = b.scatter(ScatterFn::UConcatV, 1, &[x, x])?;
    let u = b.apply_edge(ApplyFn::Linear(proj), &[Operand::direct(cat)])?;
    let mut h = x;
    let mut d_in = spec.in_dim;
    for (l, &d_out) in widths.iter().enumerate() {
        let mu = b.param(format!("l{l}.mu"), k, r);
        let inv_sigma = b.param(format!("l{l}.inv_sigma"), k, r);
        let theta = b.param(format!("l{l}.theta"), d_in, k * d_out);
        b.set_tag(Some("pseudo"));
        let w = b.apply_edge(ApplyFn::Gaussian { mu, inv_sigma }, &[Operand::direct(u)])?;
        b.set_tag(Some("projection"));
        let s = b.apply_vertex(ApplyFn::Linear(theta), &[h])?;
        b.set_tag(Some("aggregation"));
        let agg = b.aggregate(
            ScatterFn::CopyU,
            1,
            &[s],
            Some(ApplyFn::KernelMix { kernels: k }),
            &[w],
            Reduce::Sum,
            Dir::Dst,
        )?;
        b.set_tag(None);
        h = if l + 1 < widths.len() { b.apply_vertex(ApplyFn::Elem(Elementwise::Relu), &[agg])? } else { agg };
        d_in = d_out;
    }
    Ok(h)
}

/// Symmetric GCN normalisation `1 / sqrt(max(1, outdeg u) * max(1, indeg v))`.
pub fn gcn_edge_weights(graph: &Graph) -> Tensor {
    let data = graph
        .triples()
        .map(|(u, _, v)| {
            let d = graph.out_degree(u).max(1) * graph.in_degree(v).max(1);
            1.0 / (d as f64).sqrt()
        })
        .collect();
    Tensor { rows: graph.num_edges(), cols: 1, data }
}

/// Seeded values for every `Input` node, indexed by node id.
pub fn prepare_inputs(ir: &IrGraph, graph: &Graph, seed: u64) -> Result<Vec<(NodeId, Tensor)>> {
    let mut out = Vec::new();
    for n in &ir.nodes {
        if let super::OpKind::Input { name } = &n.kind {
            let t = match name.as_str() {
                "x" => {
                    let mut t = Tensor::init_seeded(graph.num_vertices(), n.cols, seed, Init::Uniform);
                    // Features in (-1, 1) regardless of width.
                    let s = (n.cols.max(1) as f64).sqrt();
                    t.data.iter_mut().for_each(|v| *v *= s);
                    t
                }
                "edge_weight" => gcn_edge_weights(graph),
                other => return Err(Error::Config(format!("no generator for input `{other}`"))),
            };
            out.push((n.id, t));
        }
    }
    Ok(out)
}
