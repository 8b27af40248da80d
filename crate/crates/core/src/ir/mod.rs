//! Graph-level intermediate representation.
//!
//! Every node produces exactly one tensor, so a node id doubles as a tensor
//! id. Nodes are stored in topological order: inputs always have smaller ids.

pub mod apply;
pub mod backward;
pub mod decompose;
pub mod models;
mod print;

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Dir, Graph};
pub use apply::{Act, ApplyFn, ParamRef, ParamView, RowCtx};

pub type NodeId = usize;

/// Row space of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Class {
    Vertex,
    Edge,
    /// Parameter-shaped (gradient outputs only).
    Param,
}

/// How an operand row is located from the consumer's row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    /// Same row id as the consumer.
    Direct,
    /// Vertex tensor read at the edge's source.
    Src,
    /// Vertex tensor read at the edge's destination.
    Dst,
}

impl Access {
    pub fn side(self) -> Option<Dir> {
        match self {
            Access::Direct => None,
            Access::Src => Some(Dir::Src),
            Access::Dst => Some(Dir::Dst),
        }
    }

    pub fn of_side(d: Dir) -> Self {
        match d {
            Dir::Src => Access::Src,
            Dir::Dst => Access::Dst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Operand {
    pub node: NodeId,
    pub access: Access,
}

impl Operand {
    pub fn direct(node: NodeId) -> Self {
        Self { node, access: Access::Direct }
    }
    pub fn src(node: NodeId) -> Self {
        Self { node, access: Access::Src }
    }
    pub fn dst(node: NodeId) -> Self {
        Self { node, access: Access::Dst }
    }
}

/// Message function of a `Scatter`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScatterFn {
    CopyU,
    CopyV,
    UAddV,
    USubV,
    /// Per-head interleaved `[u_h || v_h]`.
    UConcatV,
    /// `u * e * v` with an edge operand in the middle.
    UMulEV,
}

impl ScatterFn {
    pub fn name(self) -> &'static str {
        match self {
            ScatterFn::CopyU => "copy_u",
            ScatterFn::CopyV => "copy_v",
            ScatterFn::UAddV => "u_add_v",
            ScatterFn::USubV => "u_sub_v",
            ScatterFn::UConcatV => "u_concat_v",
            ScatterFn::UMulEV => "u_mul_e_v",
        }
    }

    /// Access pattern of each operand, in order.
    pub fn accesses(self) -> &'static [Access] {
        match self {
            ScatterFn::CopyU => &[Access::Src],
            ScatterFn::CopyV => &[Access::Dst],
            ScatterFn::UAddV | ScatterFn::USubV | ScatterFn::UConcatV => &[Access::Src, Access::Dst],
            ScatterFn::UMulEV => &[Access::Src, Access::Direct, Access::Dst],
        }
    }

    pub fn copy_of(side: Dir) -> Self {
        match side {
            Dir::Src => ScatterFn::CopyU,
            Dir::Dst => ScatterFn::CopyV,
        }
    }

    fn out_cols(self, ins: &[usize], heads: usize) -> Result<usize> {
        let c = ins[0];
        if ins.iter().any(|&x| x != c) {
            return Err(Error::Shape(format!("{}: operand widths {ins:?}", self.name())));
        }
        match self {
            ScatterFn::UConcatV => {
                if heads == 0 || c % heads != 0 {
                    return Err(Error::Shape(format!("u_concat_v: width {c} not divisible by {heads} heads")));
                }
                Ok(2 * c)
            }
            _ => Ok(c),
        }
    }

    pub fn flops_per_edge(self, out_cols: usize) -> u64 {
        let per = match self {
            ScatterFn::UMulEV => 2,
            _ => 1,
        };
        (per * out_cols) as u64
    }

    /// Computes one edge message from the operand rows.
    #[inline]
    pub fn eval(self, ins: &[&[f64]], heads: usize, out: &mut [f64]) {
        match self {
            ScatterFn::CopyU | ScatterFn::CopyV => out.copy_from_slice(ins[0]),
            ScatterFn::UAddV => {
                for (o, (&a, &b)) in out.iter_mut().zip(ins[0].iter().zip(ins[1])) {
                    *o = a + b;
                }
            }
            ScatterFn::USubV => {
                for (o, (&a, &b)) in out.iter_mut().zip(ins[0].iter().zip(ins[1])) {
                    *o = a - b;
                }
            }
            ScatterFn::UMulEV => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = ins[0][j] * ins[1][j] * ins[2][j];
                }
            }
            ScatterFn::UConcatV => {
                let k = ins[0].len() / heads;
                for h in 0..heads {
                    let base = 2 * h * k;
                    out[base..base + k].copy_from_slice(&ins[0][h * k..(h + 1) * k]);
                    out[base + k..base + 2 * k].copy_from_slice(&ins[1][h * k..(h + 1) * k]);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Reduce {
    Sum,
    Max,
}

impl Reduce {
    pub fn name(self) -> &'static str {
        match self {
            Reduce::Sum => "sum",
            Reduce::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RsKind {
    /// Softmax over each edge group.
    EdgeSoftmax,
    /// `psi(m_e, reduce(m over the group of e))`.
    Generic { reduce: Reduce, edge_fn: ApplyFn },
}

/// Which view of a forward tensor a backward graph reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Part {
    Value,
    /// Edge id that won a max reduction, stored per vertex (-1 if none).
    Argmax,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input { name: String },
    /// Gradient seed (all ones) for a forward exit.
    Seed { exit: NodeId },
    /// A forward tensor consumed by the backward graph.
    ForwardRef { node: NodeId, part: Part },
    Scatter { fun: ScatterFn, heads: usize },
    Gather { reduce: Reduce, dir: Dir },
    ApplyEdge(ApplyFn),
    ApplyVertex(ApplyFn),
    /// `Gather(reduce) . ApplyEdge(edge_fn) . Scatter(fun)`. Operands are
    /// the scatter operands followed by extra edge operands of `edge_fn`.
    Aggregate { fun: ScatterFn, heads: usize, edge_fn: Option<ApplyFn>, reduce: Reduce, dir: Dir },
    ReduceScatter { kind: RsKind, dir: Dir },
}

impl OpKind {
    pub fn is_source(&self) -> bool {
        matches!(self, OpKind::Input { .. } | OpKind::Seed { .. } | OpKind::ForwardRef { .. })
    }

    pub fn is_composite(&self) -> bool {
        matches!(self, OpKind::Aggregate { .. } | OpKind::ReduceScatter { .. })
    }

    pub fn apply_fn(&self) -> Option<&ApplyFn> {
        match self {
            OpKind::ApplyEdge(f) | OpKind::ApplyVertex(f) => Some(f),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<Operand>,
    pub class: Class,
    pub cols: usize,
    /// Free-form role label such as `"attention"`.
    pub tag: Option<String>,
    /// Composite group this node was lowered from.
    pub origin: Option<usize>,
    /// Set on `Scatter(copy)` nodes that only broadcast a reduction result.
    pub broadcast_of: Option<NodeId>,
}

impl OpNode {
    pub fn is_expensive(&self) -> bool {
        self.kind.apply_fn().is_some_and(ApplyFn::is_expensive)
    }

    pub fn is_source(&self) -> bool {
        self.kind.is_source()
    }

    /// Whether the node iterates over edges.
    pub fn runs_on_edges(&self) -> bool {
        match &self.kind {
            OpKind::ApplyEdge(_) | OpKind::Scatter { .. } | OpKind::Gather { .. } => true,
            OpKind::Aggregate { .. } | OpKind::ReduceScatter { .. } => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrGraph {
    pub nodes: Vec<OpNode>,
    pub params: Vec<ParamInfo>,
    pub exits: Vec<NodeId>,
    pub phase: Phase,
    /// Forward tensors the backward graph references (set by derivation).
    pub stash: BTreeSet<(NodeId, Part)>,
}

impl IrGraph {
    pub fn new(phase: Phase) -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), exits: Vec::new(), phase, stash: BTreeSet::new() }
    }

    pub fn node(&self, id: NodeId) -> &OpNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Row count of a node's tensor on `graph`.
    pub fn rows(&self, id: NodeId, graph: &Graph) -> usize {
        let n = &self.nodes[id];
        match n.class {
            Class::Vertex => graph.num_vertices(),
            Class::Edge => graph.num_edges(),
            Class::Param => n
                .kind
                .apply_fn()
                .and_then(ApplyFn::param_target)
                .map_or(0, |p| p.rows),
        }
    }

    /// Consumer lists, indexed by producer.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for op in &n.inputs {
                if !out[op.node].contains(&n.id) {
                    out[op.node].push(n.id);
                }
            }
        }
        out
    }

    pub fn count(&self, pred: impl Fn(&OpKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    pub fn has_composites(&self) -> bool {
        self.nodes.iter().any(|n| n.kind.is_composite())
    }

    /// Checks topological order and re-infers every shape.
    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Shape(format!("node {i} carries id {}", n.id)));
            }
            for op in &n.inputs {
                if op.node >= i {
                    return Err(Error::Shape(format!("node {i} reads later node {}", op.node)));
                }
            }
            if !n.is_source() {
                let (class, cols) = infer(self, &n.kind, &n.inputs)?;
                if (class, cols) != (n.class, n.cols) {
                    return Err(Error::Shape(format!(
                        "node {i}: recorded {:?}x{} but inferred {class:?}x{cols}",
                        n.class, n.cols
                    )));
                }
            }
        }
        for &x in &self.exits {
            if x >= self.nodes.len() {
                return Err(Error::Shape(format!("exit {x} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        print::render(self)
    }
}

fn operand_check(ir: &IrGraph, op: &Operand, want: Class, access: Option<Access>) -> Result<usize> {
    let n = ir.nodes.get(op.node).ok_or_else(|| Error::Shape(format!("dangling operand {}", op.node)))?;
    if n.class != want {
        return Err(Error::Shape(format!("operand {} is {:?}, expected {want:?}", op.node, n.class)));
    }
    if let Some(a) = access {
        if op.access != a {
            return Err(Error::Shape(format!("operand {} read as {:?}, expected {a:?}", op.node, op.access)));
        }
    }
    Ok(n.cols)
}

/// Infers output class and width of a non-source node.
pub fn infer(ir: &IrGraph, kind: &OpKind, inputs: &[Operand]) -> Result<(Class, usize)> {
    match kind {
        OpKind::Input { .. } | OpKind::Seed { .. } | OpKind::ForwardRef { .. } => {
            Err(Error::Shape("source nodes carry explicit shapes".into()))
        }
        OpKind::Scatter { fun, heads } => {
            let cols = scatter_cols(ir, *fun, *heads, inputs)?;
            Ok((Class::Edge, cols))
        }
        OpKind::Gather { .. } => {
            one_input(inputs)?;
            let c = operand_check(ir, &inputs[0], Class::Edge, Some(Access::Direct))?;
            Ok((Class::Vertex, c))
        }
        OpKind::ApplyEdge(f) => {
            let mut cols = Vec::with_capacity(inputs.len());
            for op in inputs {
                let c = match op.access {
                    Access::Direct => operand_check(ir, op, Class::Edge, None)?,
                    _ => operand_check(ir, op, Class::Vertex, None)?,
                };
                cols.push(c);
            }
            let out = f.out_cols(&cols)?;
            Ok((if f.is_param_grad() { Class::Param } else { Class::Edge }, out))
        }
        OpKind::ApplyVertex(f) => {
            let mut cols = Vec::with_capacity(inputs.len());
            for op in inputs {
                cols.push(operand_check(ir, op, Class::Vertex, Some(Access::Direct))?);
            }
            let out = f.out_cols(&cols)?;
            Ok((if f.is_param_grad() { Class::Param } else { Class::Vertex }, out))
        }
        OpKind::Aggregate { fun, heads, edge_fn, .. } => {
            let k = fun.accesses().len();
            if inputs.len() < k {
                return Err(Error::Shape("aggregate: missing scatter operands".into()));
            }
            let mut cols = scatter_cols(ir, *fun, *heads, &inputs[..k])?;
            match edge_fn {
                Some(f) => {
                    let mut ins = vec![cols];
                    for op in &inputs[k..] {
                        ins.push(operand_check(ir, op, Class::Edge, Some(Access::Direct))?);
                    }
                    if f.is_param_grad() || f.is_expensive() {
                        return Err(Error::Shape("aggregate edge function must be lightweight".into()));
                    }
                    cols = f.out_cols(&ins)?;
                }
                None if inputs.len() != k => {
                    return Err(Error::Shape("aggregate: extra operands without an edge function".into()));
                }
                None => {}
            }
            Ok((Class::Vertex, cols))
        }
        OpKind::ReduceScatter { kind, .. } => {
            one_input(inputs)?;
            let c = operand_check(ir, &inputs[0], Class::Edge, Some(Access::Direct))?;
            let cols = match kind {
                RsKind::EdgeSoftmax => c,
                RsKind::Generic { edge_fn, .. } => edge_fn.out_cols(&[c, c])?,
            };
            Ok((Class::Edge, cols))
        }
    }
}

fn one_input(inputs: &[Operand]) -> Result<()> {
    if inputs.len() == 1 {
        Ok(())
    } else {
        Err(Error::Shape(format!("expected 1 operand, got {}", inputs.len())))
    }
}

fn scatter_cols(ir: &IrGraph, fun: ScatterFn, heads: usize, inputs: &[Operand]) -> Result<usize> {
    let acc = fun.accesses();
    if inputs.len() != acc.len() {
        return Err(Error::Shape(format!("{} expects {} operands", fun.name(), acc.len())));
    }
    let mut cols = Vec::new();
    for (op, &a) in inputs.iter().zip(acc) {
        let want = if a == Access::Direct { Class::Edge } else { Class::Vertex };
        cols.push(operand_check(ir, op, want, Some(a))?);
    }
    fun.out_cols(&cols, heads)
}

/// Incremental construction with shape inference.
pub struct IrBuilder {
    ir: IrGraph,
    tag: Option<String>,
    origin: Option<usize>,
}

impl IrBuilder {
    pub fn new(phase: Phase) -> Self {
        Self { ir: IrGraph::new(phase), tag: None, origin: None }
    }

    /// Continues building on top of an existing graph.
    pub fn extend(ir: IrGraph) -> Self {
        Self { ir, tag: None, origin: None }
    }

    pub fn ir(&self) -> &IrGraph {
        &self.ir
    }

    pub fn set_tag(&mut self, tag: Option<&str>) {
        self.tag = tag.map(str::to_owned);
    }

    pub fn set_origin(&mut self, origin: Option<usize>) {
        self.origin = origin;
    }

    pub fn param(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamRef {
        let id = self.ir.params.len();
        self.ir.params.push(ParamInfo { name: name.into(), rows, cols });
        ParamRef::whole(id, rows, cols)
    }

    fn push_raw(&mut self, kind: OpKind, inputs: Vec<Operand>, class: Class, cols: usize) -> NodeId {
        let id = self.ir.nodes.len();
        self.ir.nodes.push(OpNode {
            id,
            kind,
            inputs,
            class,
            cols,
            tag: self.tag.clone(),
            origin: self.origin,
            broadcast_of: None,
        });
        id
    }

    pub fn source(&mut self, kind: OpKind, class: Class, cols: usize) -> NodeId {
        debug_assert!(kind.is_source());
        self.push_raw(kind, Vec::new(), class, cols)
    }

    pub fn input(&mut self, name: &str, class: Class, cols: usize) -> NodeId {
        self.source(OpKind::Input { name: name.into() }, class, cols)
    }

    pub fn push(&mut self, kind: OpKind, inputs: Vec<Operand>) -> Result<NodeId> {
        let (class, cols) = infer(&self.ir, &kind, &inputs)?;
        Ok(self.push_raw(kind, inputs, class, cols))
    }

    pub fn mark_broadcast(&mut self, id: NodeId, of: NodeId) {
        self.ir.nodes[id].broadcast_of = Some(of);
    }

    pub fn scatter(&mut self, fun: ScatterFn, heads: usize, ops: &[NodeId]) -> Result<NodeId> {
        let inputs = ops.iter().zip(fun.accesses()).map(|(&node, &access)| Operand { node, access }).collect();
        self.push(OpKind::Scatter { fun, heads }, inputs)
    }

    pub fn gather(&mut self, reduce: Reduce, dir: Dir, x: NodeId) -> Result<NodeId> {
        self.push(OpKind::Gather { reduce, dir }, vec![Operand::direct(x)])
    }

    /// Mean reduction, lowered to a sum followed by an inverse-degree scale.
    pub fn gather_mean(&mut self, dir: Dir, x: NodeId) -> Result<NodeId> {
        let s = self.gather(Reduce::Sum, dir, x)?;
        self.apply_vertex(ApplyFn::ScaleInvDegree(dir), &[s])
    }

    pub fn apply_edge(&mut self, f: ApplyFn, ins: &[Operand]) -> Result<NodeId> {
        self.push(OpKind::ApplyEdge(f), ins.to_vec())
    }

    pub fn apply_vertex(&mut self, f: ApplyFn, ins: &[NodeId]) -> Result<NodeId> {
        self.push(OpKind::ApplyVertex(f), ins.iter().map(|&n| Operand::direct(n)).collect())
    }

    /// Applies `f` in the row space of `like` (edge or vertex).
    pub fn apply_like(&mut self, like: Class, f: ApplyFn, ins: &[NodeId]) -> Result<NodeId> {
        let ops: Vec<Operand> = ins.iter().map(|&n| Operand::direct(n)).collect();
        match like {
            Class::Edge => self.push(OpKind::ApplyEdge(f), ops),
            Class::Vertex => self.push(OpKind::ApplyVertex(f), ops),
            Class::Param => Err(Error::Shape("no row space for parameter tensors".into())),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn aggregate(
        &mut self,
        fun: ScatterFn,
        heads: usize,
        scatter_ops: &[NodeId],
        edge_fn: Option<ApplyFn>,
        extra: &[NodeId],
        reduce: Reduce,
        dir: Dir,
    ) -> Result<NodeId> {
        let mut inputs: Vec<Operand> =
            scatter_ops.iter().zip(fun.accesses()).map(|(&node, &access)| Operand { node, access }).collect();
        inputs.extend(extra.iter().map(|&n| Operand::direct(n)));
        self.push(OpKind::Aggregate { fun, heads, edge_fn, reduce, dir }, inputs)
    }

    pub fn edge_softmax(&mut self, dir: Dir, m: NodeId) -> Result<NodeId> {
        self.push(OpKind::ReduceScatter { kind: RsKind::EdgeSoftmax, dir }, vec![Operand::direct(m)])
    }

    pub fn finish(mut self, exits: Vec<NodeId>) -> Result<IrGraph> {
        self.ir.exits = exits;
        self.ir.validate()?;
        Ok(self.ir)
    }

    pub fn into_ir(self) -> IrGraph {
        self.ir
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Elementwise;

    #[test]
    fn shape_inference_rejects_bad_operands() {
        let mut b = IrBuilder::new(Phase::Forward);
        let x = b.input("x", Class::Vertex, 4);
        let e = b.scatter(ScatterFn::UConcatV, 2, &[x, x]).unwrap();
        assert_eq!(b.ir().node(e).cols, 8);
        assert!(b.gather(Reduce::Sum, Dir::Dst, x).is_err());
        assert!(b.scatter(ScatterFn::UConcatV, 3, &[x, x]).is_err());
        let y = b.input("y", Class::Vertex, 3);
        assert!(b.scatter(ScatterFn::UAddV, 1, &[x, y]).is_err());
        let g = b.gather(Reduce::Max, Dir::Dst, e).unwrap();
        assert_eq!(b.ir().node(g).class, Class::Vertex);
        let ir = b.finish(vec![g]).unwrap();
        assert_eq!(ir.len(), 4);
    }

    #[test]
    fn vertex_operand_of_edge_apply_needs_endpoint_access() {
        let mut b = IrBuilder::new(Phase::Forward);
        let x = b.input("x", Class::Vertex, 2);
        let e = b.scatter(ScatterFn::CopyU, 1, &[x]).unwrap();
        let add = ApplyFn::Elem(Elementwise::Add);
        assert!(b.apply_edge(add.clone(), &[Operand::direct(e), Operand::dst(x)]).is_ok());
        assert!(b.apply_vertex(add, &[x, e]).is_err());
    }

    #[test]
    fn validate_catches_forward_references() {
        let mut b = IrBuilder::new(Phase::Forward);
        let x = b.input("x", Class::Vertex, 2);
        let s = b.scatter(ScatterFn::CopyU, 1, &[x]).unwrap();
        let mut ir = b.into_ir();
        ir.nodes[s].inputs[0].node = 5;
        assert!(ir.validate().is_err());
    }
}
