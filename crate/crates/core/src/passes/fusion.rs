//! Operator fusion under a unified thread mapping.
//!
//! A region is a group of graph operators and lightweight Apply nodes that run
//! as one kernel: intermediates stay in per-worker scratch and only boundary
//! tensors touch memory. Expensive Apply nodes are barriers and always form a
//! region on their own.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{DegreeStats, Dir};
use crate::ir::{Class, IrGraph, NodeId, OpKind};

/// Degree-skew ratio above which edge-balanced mapping is chosen.
pub const SKEW_THRESHOLD: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapping {
    VertexBalanced,
    EdgeBalanced,
}

impl std::str::FromStr for Mapping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vertex" | "vertex_balanced" | "nb" => Ok(Self::VertexBalanced),
            "edge" | "edge_balanced" | "eb" => Ok(Self::EdgeBalanced),
            other => Err(Error::Config(format!("unknown mapping `{other}`"))),
        }
    }
}

impl Mapping {
    pub fn name(self) -> &'static str {
        match self {
            Mapping::VertexBalanced => "vertex_balanced",
            Mapping::EdgeBalanced => "edge_balanced",
        }
    }
}

/// Static structure of one region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Region {
    pub id: usize,
    /// Members in graph order.
    pub nodes: Vec<NodeId>,
    pub mapping: Mapping,
    /// Grouping of edges into vertex units under vertex-balanced mapping.
    pub orientation: Dir,
    /// An edge operator reads a vertex tensor derived from a reduction inside
    /// the region (the ReduceScatter shape); only vertex-balanced mapping keeps
    /// this local.
    pub forced_vertex: bool,
    pub expensive: bool,
    /// Tensors read from outside the region.
    pub inputs: Vec<NodeId>,
    /// Members consumed outside the region or listed as exits.
    pub outputs: Vec<NodeId>,
    /// Members that never leave the region.
    pub internal: Vec<NodeId>,
    /// Phase of each member (parallel to `nodes`): edge work of phase `p`
    /// runs before vertex work of phase `p`, which runs before phase `p + 1`.
    pub phases: Vec<usize>,
    /// Edge members read by an edge member of a later phase.
    pub cross_phase: Vec<NodeId>,
}

impl Region {
    pub fn contains(&self, n: NodeId) -> bool {
        self.nodes.binary_search(&n).is_ok()
    }

    pub fn phase_of(&self, n: NodeId) -> usize {
        self.phases[self.nodes.binary_search(&n).expect("member")]
    }

    pub fn num_phases(&self) -> usize {
        self.phases.iter().max().map_or(0, |&p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionPlan {
    pub regions: Vec<Region>,
    /// Expensive nodes (each in a singleton region).
    pub barriers: Vec<NodeId>,
    pub fused: bool,
}

impl FusionPlan {
    pub fn region_of(&self) -> Vec<Option<usize>> {
        let n = self.regions.iter().flat_map(|r| r.nodes.iter()).max().map_or(0, |&m| m + 1);
        let mut out = vec![None; n];
        for r in &self.regions {
            for &m in &r.nodes {
                out[m] = Some(r.id);
            }
        }
        out
    }

    /// Region of `n`, for plans over graphs indexed like `n`.
    pub fn find(&self, n: NodeId) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(n))
    }
}

fn is_edge_member(ir: &IrGraph, n: NodeId) -> bool {
    let node = ir.node(n);
    matches!(node.kind, OpKind::Scatter { .. } | OpKind::ApplyEdge(_))
}

/// Phase assignment for a candidate member set; `None` if the set cannot run
/// as one region (a Gather orientation conflict or an internal vertex read on
/// the wrong side).
struct Shape {
    phases: Vec<usize>,
    orientation: Dir,
    forced_vertex: bool,
}

fn analyze(ir: &IrGraph, members: &[NodeId]) -> Option<Shape> {
    let pos = |n: NodeId| members.binary_search(&n).ok();
    let mut orientation: Option<Dir> = None;
    for &m in members {
        if let OpKind::Gather { dir, .. } = ir.node(m).kind {
            if orientation.is_some_and(|o| o != dir) {
                return None;
            }
            orientation = Some(dir);
        }
    }
    let mut forced = false;
    let mut phases = vec![0usize; members.len()];
    // Member depends on a reduction inside the region.
    let mut reduced = vec![false; members.len()];
    for (i, &m) in members.iter().enumerate() {
        let node = ir.node(m);
        let mut p = 0;
        reduced[i] = matches!(node.kind, OpKind::Gather { .. });
        for op in &node.inputs {
            let Some(j) = pos(op.node) else { continue };
            let producer = ir.node(op.node);
            let edge_reader = is_edge_member(ir, m);
            match (edge_reader, producer.class) {
                (true, Class::Vertex) => {
                    // Vertex value produced in this region, read per edge.
                    let side = op.access.side()?;
                    if orientation.is_some_and(|o| o != side) {
                        return None;
                    }
                    orientation = Some(side);
                    forced |= reduced[j];
                    p = p.max(phases[j] + 1);
                }
                _ => p = p.max(phases[j]),
            }
            reduced[i] |= reduced[j];
        }
        phases[i] = p;
    }
    // Side reads must match the final orientation (fixed possibly late).
    let o = orientation.unwrap_or(Dir::Dst);
    for &m in members {
        if !is_edge_member(ir, m) {
            continue;
        }
        for op in &ir.node(m).inputs {
            if pos(op.node).is_some() && ir.node(op.node).class == Class::Vertex && op.access.side() != Some(o) {
                return None;
            }
        }
    }
    Some(Shape { phases, orientation: o, forced_vertex: forced })
}

fn choose_mapping(forced: bool, stats: &DegreeStats, orientation: Dir, over: Option<Mapping>, id: usize) -> Result<Mapping> {
    if let Some(m) = over {
        if forced && m == Mapping::EdgeBalanced {
            return Err(Error::Plan(format!(
                "region {id} broadcasts a reduction result back to edges; edge_balanced mapping is not legal"
            )));
        }
        return Ok(m);
    }
    if forced {
        return Ok(Mapping::VertexBalanced);
    }
    let max = match orientation {
        Dir::Dst => stats.max_in_degree,
        Dir::Src => stats.max_out_degree,
    } as f64;
    let ratio = max / stats.mean_in_degree.max(1.0);
    Ok(if ratio > SKEW_THRESHOLD { Mapping::EdgeBalanced } else { Mapping::VertexBalanced })
}

fn build_region(
    ir: &IrGraph,
    consumers: &[Vec<NodeId>],
    id: usize,
    mut nodes: Vec<NodeId>,
    stats: &DegreeStats,
    over: Option<Mapping>,
) -> Result<Region> {
    nodes.sort_unstable();
    let shape = analyze(ir, &nodes).ok_or_else(|| Error::Plan(format!("region {id} has no legal mapping")))?;
    let set: BTreeSet<NodeId> = nodes.iter().copied().collect();
    let expensive = nodes.iter().any(|&n| ir.node(n).is_expensive());
    let mut inputs = BTreeSet::new();
    for &n in &nodes {
        for op in &ir.node(n).inputs {
            if !set.contains(&op.node) {
                inputs.insert(op.node);
            }
        }
    }
    let exits: BTreeSet<NodeId> = ir.exits.iter().copied().collect();
    let mut outputs = Vec::new();
    let mut internal = Vec::new();
    let mut cross_phase = Vec::new();
    for (i, &n) in nodes.iter().enumerate() {
        let node = ir.node(n);
        if node.class == Class::Param {
            continue;
        }
        let escapes = exits.contains(&n) || consumers[n].iter().any(|c| !set.contains(c));
        if escapes {
            outputs.push(n);
        } else {
            internal.push(n);
        }
        if node.class == Class::Edge {
            let late = consumers[n].iter().any(|&c| {
                set.contains(&c) && {
                    let j = nodes.binary_search(&c).unwrap();
                    shape.phases[j] > shape.phases[i]
                }
            });
            if late {
                cross_phase.push(n);
            }
        }
    }
    let mapping = choose_mapping(shape.forced_vertex, stats, shape.orientation, over, id)?;
    Ok(Region {
        id,
        nodes,
        mapping,
        orientation: shape.orientation,
        forced_vertex: shape.forced_vertex,
        expensive,
        inputs: inputs.into_iter().collect(),
        outputs,
        internal,
        phases: shape.phases,
        cross_phase,
    })
}

fn finalize(ir: &IrGraph, groups: Vec<Vec<NodeId>>, stats: &DegreeStats, over: Option<Mapping>, fused: bool) -> Result<FusionPlan> {
    let consumers = ir.consumers();
    let mut regions = Vec::with_capacity(groups.len());
    for (id, g) in groups.into_iter().enumerate() {
        regions.push(build_region(ir, &consumers, id, g, stats, over)?);
    }
    let barriers = ir.nodes.iter().filter(|n| n.is_expensive()).map(|n| n.id).collect();
    Ok(FusionPlan { regions, barriers, fused })
}

/// Greedy list scheduling into maximal legal regions. Ready expensive nodes
/// are emitted first as singleton regions; otherwise the lowest-id ready
/// lightweight node that keeps the open region legal joins it.
pub fn plan_fusion(ir: &IrGraph, stats: &DegreeStats, over: Option<Mapping>) -> Result<FusionPlan> {
    if ir.has_composites() {
        return Err(Error::Plan("fusion expects a lowered graph".into()));
    }
    let n = ir.len();
    let mut done = vec![false; n];
    for node in &ir.nodes {
        done[node.id] = node.is_source();
    }
    let ready = |done: &[bool], id: NodeId| -> bool {
        !done[id] && ir.node(id).inputs.iter().all(|op| done[op.node])
    };
    let mut groups: Vec<Vec<NodeId>> = Vec::new();
    let mut open: Vec<NodeId> = Vec::new();
    let mut remaining = done.iter().filter(|&&d| !d).count();
    while remaining > 0 {
        if open.is_empty() {
            if let Some(x) = (0..n).find(|&i| ready(&done, i) && ir.node(i).is_expensive()) {
                done[x] = true;
                remaining -= 1;
                groups.push(vec![x]);
                continue;
            }
        }
        let mut pick = None;
        for i in 0..n {
            if !ready(&done, i) || ir.node(i).is_expensive() {
                continue;
            }
            let mut cand = open.clone();
            cand.push(i);
            cand.sort_unstable();
            if analyze(ir, &cand).is_some() {
                pick = Some(i);
                break;
            }
        }
        match pick {
            Some(i) => {
                done[i] = true;
                remaining -= 1;
                open.push(i);
            }
            None if !open.is_empty() => groups.push(std::mem::take(&mut open)),
            None => return Err(Error::Plan("scheduler stalled".into())),
        }
    }
    if !open.is_empty() {
        groups.push(open);
    }
    finalize(ir, groups, stats, over, true)
}

/// Baseline plan without fusion: one region per lowered composite, one per
/// remaining operator, with a lightweight Apply folded into the region of its
/// only producer (an epilogue, as a library kernel would do).
pub fn plan_unfused(ir: &IrGraph, stats: &DegreeStats, over: Option<Mapping>) -> Result<FusionPlan> {
    if ir.has_composites() {
        return Err(Error::Plan("planning expects a lowered graph".into()));
    }
    let mut groups: Vec<Vec<NodeId>> = Vec::new();
    let mut group_origin: Vec<Option<usize>> = Vec::new();
    let mut group_of = vec![usize::MAX; ir.len()];
    for node in &ir.nodes {
        if node.is_source() {
            continue;
        }
        let last = groups.len().checked_sub(1);
        let join = match (last, node.origin) {
            (Some(g), Some(o)) if group_origin[g] == Some(o) => Some(g),
            (Some(g), None) if node.kind.apply_fn().is_some() && !node.is_expensive() => {
                let producers: BTreeSet<NodeId> = node
                    .inputs
                    .iter()
                    .map(|o| o.node)
                    .filter(|&p| !ir.node(p).is_source())
                    .collect();
                let epilogue = producers.len() == 1
                    && producers.iter().all(|&p| group_of[p] == g)
                    && !groups[g].iter().any(|&m| ir.node(m).is_expensive());
                let mut cand = groups[g].clone();
                cand.push(node.id);
                (epilogue && analyze(ir, &cand).is_some()).then_some(g)
            }
            _ => None,
        };
        match join {
            Some(g) => {
                groups[g].push(node.id);
                group_of[node.id] = g;
            }
            None => {
                group_of[node.id] = groups.len();
                groups.push(vec![node.id]);
                group_origin.push(node.origin);
            }
        }
    }
    finalize(ir, groups, stats, over, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{k_regular_in, star};
    use crate::ir::decompose::decompose;
    use crate::ir::models::{build, ModelKind, ModelSpec};
    use crate::passes::reorganize::reorganize;

    fn lowered(kind: ModelKind, layers: usize) -> IrGraph {
        let spec = ModelSpec { layers, ..ModelSpec::new(kind, 4, 2, 2) };
        reorganize(&decompose(&build(&spec, 0).unwrap().ir).unwrap()).unwrap().0
    }

    #[test]
    fn gat_layer_fuses_into_one_vertex_balanced_region() {
        let ir = lowered(ModelKind::Gat, 1);
        let stats = k_regular_in(10, 3, 1).unwrap().degree_stats();
        let plan = plan_fusion(&ir, &stats, None).unwrap();
        let graph_regions: Vec<&Region> = plan.regions.iter().filter(|r| !r.expensive).collect();
        assert_eq!(graph_regions.len(), 1);
        let r = graph_regions[0];
        assert!(r.forced_vertex);
        assert_eq!(r.mapping, Mapping::VertexBalanced);
        assert_eq!(r.nodes.len(), 12);
        assert_eq!(plan.barriers.len(), 3);
    }

    #[test]
    fn edge_override_on_softmax_region_is_a_plan_error() {
        let ir = lowered(ModelKind::Gat, 1);
        let stats = k_regular_in(10, 3, 1).unwrap().degree_stats();
        let err = plan_fusion(&ir, &stats, Some(Mapping::EdgeBalanced)).unwrap_err();
        assert!(matches!(err, Error::Plan(_)));
        assert_eq!(err.exit_code(), 6);
    }

    #[test]
    fn skewed_graph_picks_edge_balanced_without_softmax() {
        let ir = lowered(ModelKind::Gcn, 1);
        let stats = star(1000).unwrap().degree_stats();
        let plan = plan_fusion(&ir, &stats, None).unwrap();
        let r = plan.regions.iter().find(|r| !r.expensive).unwrap();
        assert_eq!(r.mapping, Mapping::EdgeBalanced);
        let even = k_regular_in(10, 3, 1).unwrap().degree_stats();
        let plan = plan_fusion(&ir, &even, None).unwrap();
        assert!(plan.regions.iter().all(|r| r.mapping == Mapping::VertexBalanced));
    }

    #[test]
    fn edgeconv_barriers_split_graph_ops() {
        let ir = lowered(ModelKind::EdgeConv, 1);
        let stats = k_regular_in(10, 3, 1).unwrap().degree_stats();
        let plan = plan_fusion(&ir, &stats, None).unwrap();
        assert_eq!(plan.barriers.len(), 2);
        let light: Vec<&Region> = plan.regions.iter().filter(|r| !r.expensive).collect();
        assert_eq!(light.len(), 1);
        assert_eq!(light[0].nodes.len(), 3);
    }

    #[test]
    fn regions_cover_every_operator_once() {
        for kind in [ModelKind::Gcn, ModelKind::Gat, ModelKind::EdgeConv, ModelKind::MoNet] {
            let ir = lowered(kind, 2);
            let stats = k_regular_in(10, 3, 1).unwrap().degree_stats();
            for plan in [plan_fusion(&ir, &stats, None).unwrap(), plan_unfused(&ir, &stats, None).unwrap()] {
                let mut seen: Vec<NodeId> = plan.regions.iter().flat_map(|r| r.nodes.clone()).collect();
                seen.sort_unstable();
                let ops: Vec<NodeId> = ir.nodes.iter().filter(|n| !n.is_source()).map(|n| n.id).collect();
                assert_eq!(seen, ops);
                for r in &plan.regions {
                    assert!(!r.expensive || r.nodes.len() == 1);
                }
                // Regions run in order: inputs come from earlier regions.
                let of = plan.region_of();
                for r in &plan.regions {
                    for &i in &r.inputs {
                        if let Some(g) = of.get(i).copied().flatten() {
                            assert!(g < r.id);
                        }
                    }
                }
            }
        }
    }
}
