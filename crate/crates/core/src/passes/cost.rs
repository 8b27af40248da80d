//! Static cost model.
//!
//! Closed-form FLOP, IO and memory counts for a compiled pipeline on a given
//! graph and worker count. The executor measures the same quantities while it
//! runs and the two must agree exactly.
//!
//! IO convention: a region pays, for each tensor it reads from outside, the
//! largest number of elements any single member touches (a kernel loads an
//! operand once and reuses it across the fused members that share it). A
//! vertex tensor read per edge is charged per edge. Writes are charged for
//! boundary outputs and for edge-sized tensors kept for the backward pass.
//! Parameters are not counted.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use serde::Serialize;

use crate::graph::Graph;
use crate::ir::{Class, IrGraph, NodeId, OpKind, OpNode, Part, Phase, Reduce};
use crate::passes::fusion::{FusionPlan, Mapping, Region};
use crate::passes::pipeline::Pipeline;

/// Identity of a tensor across both passes.
pub type Key = (Phase, NodeId, Part);

/// Contiguous split of `0..n` into `workers` ranges of `ceil(n / workers)`
/// (trailing ranges may be empty).
pub fn partition(n: usize, workers: usize) -> Vec<Range<usize>> {
    let w = workers.max(1);
    let chunk = n.div_ceil(w);
    (0..w).map(|i| (i * chunk).min(n)..((i + 1) * chunk).min(n)).collect()
}

/// How a member participates in a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Scatter or ApplyEdge producing one row per edge.
    Edge,
    Gather { max: bool },
    Vertex,
    /// Parameter gradient accumulated over edges.
    ParamEdge,
    /// Parameter gradient accumulated over vertices.
    ParamVertex,
}

pub fn role(node: &OpNode) -> Role {
    match (&node.kind, node.class) {
        (OpKind::Scatter { .. }, _) => Role::Edge,
        (OpKind::Gather { reduce, .. }, _) => Role::Gather { max: *reduce == Reduce::Max },
        (OpKind::ApplyEdge(_), Class::Param) => Role::ParamEdge,
        (OpKind::ApplyEdge(_), _) => Role::Edge,
        (OpKind::ApplyVertex(_), Class::Param) => Role::ParamVertex,
        (OpKind::ApplyVertex(_), _) => Role::Vertex,
        (k, _) => unreachable!("{k:?} is not a region member"),
    }
}

impl Role {
    pub fn on_edges(self) -> bool {
        matches!(self, Role::Edge | Role::Gather { .. } | Role::ParamEdge)
    }

    /// Scratch cells per row, including the argmax of a max reduction.
    pub fn vertex_width(self, cols: usize) -> usize {
        match self {
            Role::Gather { max: true } => 2 * cols,
            _ => cols,
        }
    }
}

fn domain_rows(r: Role, g: &Graph) -> u64 {
    if r.on_edges() {
        g.num_edges() as u64
    } else {
        g.num_vertices() as u64
    }
}

fn in_cols(ir: &IrGraph, node: &OpNode) -> Vec<usize> {
    node.inputs.iter().map(|o| ir.node(o.node).cols).collect()
}

/// FLOPs charged for one evaluated row of `node`.
pub fn row_flops(ir: &IrGraph, node: &OpNode) -> u64 {
    match &node.kind {
        OpKind::Scatter { fun, .. } => fun.flops_per_edge(node.cols),
        OpKind::Gather { .. } => node.cols as u64,
        OpKind::ApplyEdge(f) | OpKind::ApplyVertex(f) => f.flops_per_row(&in_cols(ir, node), node.cols),
        _ => 0,
    }
}

/// Elements of operand slot `i` touched per evaluated row.
pub fn slot_reads(ir: &IrGraph, node: &OpNode, i: usize) -> u64 {
    match &node.kind {
        OpKind::ApplyEdge(f) | OpKind::ApplyVertex(f) => f.reads_per_row(i, &in_cols(ir, node), node.cols) as u64,
        _ => ir.node(node.inputs[i].node).cols as u64,
    }
}

/// Tensors a region writes to memory: boundary outputs plus members kept for
/// the backward pass.
pub fn materialized(ir: &IrGraph, region: &Region, stored: &BTreeSet<(NodeId, Part)>) -> Vec<(NodeId, Part)> {
    let mut out = Vec::new();
    for &n in &region.nodes {
        let node = ir.node(n);
        if node.class == Class::Param {
            continue;
        }
        if region.outputs.contains(&n) || stored.contains(&(n, Part::Value)) {
            out.push((n, Part::Value));
        }
        if role(node) == (Role::Gather { max: true }) && stored.contains(&(n, Part::Argmax)) {
            out.push((n, Part::Argmax));
        }
    }
    out
}

/// Scalars held by a tensor.
pub fn key_units(ir: &IrGraph, n: NodeId, part: Part, g: &Graph) -> u64 {
    let node = ir.node(n);
    let rows = match part {
        Part::Value => ir.rows(n, g),
        Part::Argmax => g.num_vertices(),
    };
    (rows * node.cols) as u64
}

/// Predicted `(reads, writes)` of one region.
pub fn region_io(ir: &IrGraph, region: &Region, g: &Graph, stored: &BTreeSet<(NodeId, Part)>) -> (u64, u64) {
    let mut reads = 0;
    for &t in &region.inputs {
        let mut best = 0;
        for &c in &region.nodes {
            let node = ir.node(c);
            let rows = domain_rows(role(node), g);
            let per: u64 = (0..node.inputs.len()).filter(|&i| node.inputs[i].node == t).map(|i| slot_reads(ir, node, i)).sum();
            best = best.max(rows * per);
        }
        reads += best;
    }
    let mut writes = 0;
    for (n, part) in materialized(ir, region, stored) {
        let boundary = region.outputs.contains(&n);
        if part == Part::Value && (boundary || ir.node(n).class == Class::Edge) {
            writes += key_units(ir, n, part, g);
        }
    }
    (reads, writes)
}

/// Scratch widths of a region, shared with the executor's buffer layout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScratchShape {
    /// One row of every edge member (the per-edge working set).
    pub cell: usize,
    /// One row of every edge member read by a later phase.
    pub cross: usize,
    /// One row of every vertex member (argmax included).
    pub vertex: usize,
    /// One row of every reduction accumulator (argmax included).
    pub gather: usize,
}

pub fn scratch_shape(ir: &IrGraph, region: &Region) -> ScratchShape {
    let mut s = ScratchShape::default();
    for &n in &region.nodes {
        let node = ir.node(n);
        match role(node) {
            Role::Edge => s.cell += node.cols,
            r @ Role::Gather { .. } => {
                s.vertex += r.vertex_width(node.cols);
                s.gather += r.vertex_width(node.cols);
            }
            Role::Vertex => s.vertex += node.cols,
            Role::ParamEdge | Role::ParamVertex => {}
        }
    }
    s.cross = region.cross_phase.iter().map(|&n| ir.node(n).cols).sum();
    s
}

/// Predicted scratch per worker plus the shared part (edge-balanced vertex
/// buffers).
pub fn region_scratch(ir: &IrGraph, region: &Region, g: &Graph, workers: usize) -> (Vec<u64>, u64) {
    let s = scratch_shape(ir, region);
    let v = g.num_vertices();
    match region.mapping {
        Mapping::VertexBalanced => {
            let idx = g.index(region.orientation);
            let per = partition(v, workers)
                .into_iter()
                .map(|r| {
                    if r.is_empty() {
                        return 0;
                    }
                    let maxdeg = r.map(|u| idx.degree(u)).max().unwrap_or(0);
                    (s.cell + s.cross * maxdeg + s.vertex + s.gather) as u64
                })
                .collect();
            (per, 0)
        }
        Mapping::EdgeBalanced => {
            let per = partition(g.num_edges(), workers)
                .into_iter()
                .map(|r| if r.is_empty() { 0 } else { (s.cell + s.cross * r.len() + s.gather * v) as u64 })
                .collect();
            (per, (s.vertex * v) as u64)
        }
    }
}

/// Allocations and releases around one region.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Step {
    pub alloc: Vec<Key>,
    pub free: Vec<Key>,
}

/// Tensor lifetimes over a training step (or an inference pass).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schedule {
    pub entries: Vec<Key>,
    pub forward: Vec<Step>,
    pub seeds: Vec<Key>,
    pub backward: Vec<Step>,
}

/// Store key a backward-graph tensor resolves to.
pub fn resolve(bwd: &IrGraph, n: NodeId) -> Key {
    match bwd.node(n).kind {
        OpKind::ForwardRef { node, part } => (Phase::Forward, node, part),
        _ => (Phase::Backward, n, Part::Value),
    }
}

fn last_uses(plan: &FusionPlan, key: impl Fn(NodeId) -> Key) -> HashMap<Key, usize> {
    let mut last = HashMap::new();
    for (i, r) in plan.regions.iter().enumerate() {
        for &t in &r.inputs {
            last.insert(key(t), i);
        }
    }
    last
}

pub fn schedule(p: &Pipeline) -> Schedule {
    let fwd = &p.fwd;
    let fk = |n: NodeId| (Phase::Forward, n, Part::Value);
    let entries: Vec<Key> = fwd.nodes.iter().filter(|n| matches!(n.kind, OpKind::Input { .. })).map(|n| fk(n.id)).collect();
    let mut persistent: BTreeSet<Key> = entries.iter().copied().collect();
    persistent.extend(fwd.exits.iter().map(|&x| fk(x)));
    persistent.extend(p.stored.iter().map(|&(n, part)| (Phase::Forward, n, part)));

    let last = last_uses(&p.fwd_plan, fk);
    let mut forward = vec![Step::default(); p.fwd_plan.regions.len()];
    for (i, r) in p.fwd_plan.regions.iter().enumerate() {
        for (n, part) in materialized(fwd, r, &p.stored) {
            let k = (Phase::Forward, n, part);
            forward[i].alloc.push(k);
            if !persistent.contains(&k) {
                let at = last.get(&k).copied().unwrap_or(i);
                forward[at].free.push(k);
            }
        }
    }

    let mut seeds = Vec::new();
    let mut backward = Vec::new();
    if let Some(b) = &p.bwd {
        let bwd = &b.ir;
        seeds = bwd.nodes.iter().filter(|n| matches!(n.kind, OpKind::Seed { .. })).map(|n| resolve(bwd, n.id)).collect();
        let last = last_uses(&b.plan, |n| resolve(bwd, n));
        backward = vec![Step::default(); b.plan.regions.len()];
        let none = BTreeSet::new();
        for (i, r) in b.plan.regions.iter().enumerate() {
            for (n, part) in materialized(bwd, r, &none) {
                let k = (Phase::Backward, n, part);
                backward[i].alloc.push(k);
                let at = last.get(&k).copied().unwrap_or(i);
                backward[at].free.push(k);
            }
        }
        for &k in &seeds {
            if let Some(&at) = last.get(&k) {
                backward[at].free.push(k);
            }
        }
        // Kept tensors die after their last backward reader.
        let keep: BTreeSet<Key> = entries.iter().copied().chain(fwd.exits.iter().map(|&x| fk(x))).collect();
        for &(n, part) in &p.stored {
            let k = (Phase::Forward, n, part);
            if keep.contains(&k) {
                continue;
            }
            if let Some(&at) = last.get(&k) {
                backward[at].free.push(k);
            }
        }
    }
    Schedule { entries, forward, seeds, backward }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegionCost {
    pub phase: Phase,
    pub region: usize,
    pub mapping: Mapping,
    pub expensive: bool,
    pub members: usize,
    pub flops: u64,
    pub io_read: u64,
    pub io_write: u64,
    pub scratch: u64,
}

/// Counter values compared between prediction and measurement.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub flops: u64,
    pub io_units: u64,
    /// IO of forward regions without an expensive operator.
    pub graph_io_units: u64,
    pub peak_mem_units: u64,
    /// Scalars kept from forward for backward.
    pub stash_units: u64,
    /// FLOPs keyed by `phase/tag`.
    pub tag_flops: BTreeMap<String, u64>,
    pub regions: Vec<RegionCost>,
}

impl Counts {
    pub fn add_region(&mut self, rc: RegionCost) {
        self.flops += rc.flops;
        self.io_units += rc.io_read + rc.io_write;
        if rc.phase == Phase::Forward && !rc.expensive {
            self.graph_io_units += rc.io_read + rc.io_write;
        }
        self.regions.push(rc);
    }

    pub fn add_tag_flops(&mut self, phase: Phase, tag: Option<&str>, flops: u64) {
        let p = match phase {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
        };
        *self.tag_flops.entry(format!("{p}/{}", tag.unwrap_or("untagged"))).or_default() += flops;
    }

    /// FLOPs of forward nodes carrying `tag`.
    pub fn forward_tag_flops(&self, tag: &str) -> u64 {
        self.tag_flops.get(&format!("forward/{tag}")).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    #[serde(flatten)]
    pub counts: Counts,
    pub wall_ms: f64,
}

fn units_of(p: &Pipeline, g: &Graph, k: Key) -> u64 {
    let (phase, n, part) = k;
    match phase {
        Phase::Forward => key_units(&p.fwd, n, part, g),
        Phase::Backward => key_units(&p.bwd.as_ref().expect("backward present").ir, n, part, g),
    }
}

/// Static prediction for one pass of `p` (backward included when compiled for
/// training).
pub fn cost_model(p: &Pipeline, g: &Graph, workers: usize) -> CostReport {
    let sched = schedule(p);
    let mut c = Counts::default();
    let mut live: u64 = sched.entries.iter().map(|&k| units_of(p, g, k)).sum();
    let mut peak = live;

    let passes: Vec<(&IrGraph, &FusionPlan, &[Step], BTreeSet<(NodeId, Part)>)> = {
        let mut v = vec![(&p.fwd, &p.fwd_plan, &sched.forward[..], p.stored.clone())];
        if let Some(b) = &p.bwd {
            v.push((&b.ir, &b.plan, &sched.backward[..], BTreeSet::new()));
        }
        v
    };
    for (ir, plan, steps, stored) in passes {
        if ir.phase == Phase::Backward {
            c.stash_units = p.stored.iter().map(|&(n, part)| key_units(&p.fwd, n, part, g)).sum();
            live += sched.seeds.iter().map(|&k| units_of(p, g, k)).sum::<u64>();
            peak = peak.max(live);
        }
        for (r, step) in plan.regions.iter().zip(steps) {
            let mut flops = 0;
            for &n in &r.nodes {
                let node = ir.node(n);
                let f = domain_rows(role(node), g) * row_flops(ir, node);
                flops += f;
                c.add_tag_flops(ir.phase, node.tag.as_deref(), f);
            }
            let (io_read, io_write) = region_io(ir, r, g, &stored);
            let (per, shared) = region_scratch(ir, r, g, workers);
            let scratch = per.iter().sum::<u64>() + shared;
            live += step.alloc.iter().map(|&k| units_of(p, g, k)).sum::<u64>();
            peak = peak.max(live + scratch);
            live -= step.free.iter().map(|&k| units_of(p, g, k)).sum::<u64>();
            c.add_region(RegionCost {
                phase: ir.phase,
                region: r.id,
                mapping: r.mapping,
                expensive: r.expensive,
                members: r.nodes.len(),
                flops,
                io_read,
                io_write,
                scratch,
            });
        }
    }
    if p.bwd.is_none() {
        c.stash_units = p.stored.iter().map(|&(n, part)| key_units(&p.fwd, n, part, g)).sum();
    }
    c.peak_mem_units = peak;
    CostReport { counts: c, wall_ms: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::ir::models::{build, ModelKind, ModelSpec};
    use crate::passes::pipeline::{compile, OptLevel};

    fn g3() -> Graph {
        Graph::from_edges(3, &[(0, 2), (1, 2), (0, 1)]).unwrap()
    }

    fn gat(opt: OptLevel, g: &Graph) -> CostReport {
        let spec = ModelSpec { layers: 1, ..ModelSpec::new(ModelKind::Gat, 3, 2, 2) };
        let model = build(&spec, 42).unwrap();
        let p = compile(&model.ir, opt, &g.degree_stats(), None, true).unwrap();
        cost_model(&p, g, 1)
    }

    #[test]
    fn gat_attention_flops_on_g3() {
        let g = g3();
        assert_eq!(gat(OptLevel::None, &g).counts.forward_tag_flops("attention"), 39);
        assert_eq!(gat(OptLevel::Reorg, &g).counts.forward_tag_flops("attention"), 30);
    }

    #[test]
    fn gat_graph_io_on_g3() {
        let g = g3();
        assert_eq!(gat(OptLevel::Reorg, &g).counts.graph_io_units, 45);
        assert_eq!(gat(OptLevel::ReorgFusion, &g).counts.graph_io_units, 33);
    }

    #[test]
    fn recompute_shrinks_stash() {
        let g = g3();
        let stash = gat(OptLevel::ReorgFusion, &g).counts;
        let all = gat(OptLevel::All, &g).counts;
        assert!(all.stash_units < stash.stash_units);
    }

    #[test]
    fn partition_is_contiguous_and_covering() {
        assert_eq!(partition(10, 4), vec![0..3, 3..6, 6..9, 9..10]);
        assert_eq!(partition(2, 4), vec![0..1, 1..2, 2..2, 2..2]);
        assert_eq!(partition(0, 3), vec![0..0, 0..0, 0..0]);
        assert_eq!(partition(5, 1), vec![0..5]);
    }
}
