//! Recomputation-based checkpointing.
//!
//! Every forward tensor the backward graph reads is either kept in the stash
//! store or regenerated during backward from stashed and entry tensors. Cheap
//! O(|E|) tensors are regenerated; O(|V|) tensors are kept.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{Class, IrBuilder, IrGraph, NodeId, OpKind, Operand, Part, Phase};

/// Default per-element operation budget for regenerating a tensor.
pub const RECOMPUTE_THRESHOLD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Stash,
    Recompute,
    /// Model input, always available.
    Entry,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointPlan {
    /// Label of every forward tensor the (spliced) backward graph reads.
    pub labels: BTreeMap<(NodeId, Part), Label>,
    /// Forward nodes re-executed during backward, in graph order.
    pub recompute_nodes: BTreeSet<NodeId>,
    pub threshold: usize,
}

impl CheckpointPlan {
    /// Tensors the forward pass must write to the stash store.
    pub fn stored(&self) -> BTreeSet<(NodeId, Part)> {
        self.labels.iter().filter(|(_, &l)| l == Label::Stash).map(|(&k, _)| k).collect()
    }

    pub fn label(&self, node: NodeId, part: Part) -> Option<Label> {
        self.labels.get(&(node, part)).copied()
    }
}

fn entry_or_stash(fwd: &IrGraph, n: NodeId) -> Label {
    if matches!(fwd.node(n).kind, OpKind::Input { .. }) {
        Label::Entry
    } else {
        Label::Stash
    }
}

/// Keeps every referenced forward tensor.
pub fn stash_all(fwd: &IrGraph, bwd: &IrGraph) -> CheckpointPlan {
    let labels = bwd.stash.iter().map(|&(n, p)| ((n, p), entry_or_stash(fwd, n))).collect();
    CheckpointPlan { labels, recompute_nodes: BTreeSet::new(), threshold: 0 }
}

/// Operations per output element, or `None` when the node may not be
/// regenerated (expensive, a reduction, or a source).
fn elem_ops(fwd: &IrGraph, n: NodeId) -> Option<usize> {
    let node = fwd.node(n);
    let cols = node.cols.max(1);
    let flops = match &node.kind {
        OpKind::Scatter { fun, .. } => fun.flops_per_edge(node.cols),
        OpKind::ApplyEdge(f) if !f.is_expensive() && !f.is_param_grad() => {
            let ins: Vec<usize> = node.inputs.iter().map(|o| fwd.node(o.node).cols).collect();
            f.flops_per_row(&ins, node.cols)
        }
        _ => return None,
    } as usize;
    Some(flops.div_ceil(cols))
}

struct Probe {
    cost: usize,
    nodes: BTreeSet<NodeId>,
    leaves: BTreeSet<NodeId>,
}

/// Incremental cost of producing `n` given what is already available.
fn probe(fwd: &IrGraph, n: NodeId, avail: &BTreeSet<NodeId>, acc: &mut Probe) -> bool {
    if avail.contains(&n) || acc.nodes.contains(&n) || acc.leaves.contains(&n) {
        return true;
    }
    let node = fwd.node(n);
    if node.class == Class::Vertex || matches!(node.kind, OpKind::Input { .. }) {
        acc.leaves.insert(n);
        return true;
    }
    let Some(ops) = elem_ops(fwd, n) else { return false };
    acc.cost += ops;
    acc.nodes.insert(n);
    node.inputs.iter().all(|o| probe(fwd, o.node, avail, acc))
}

/// Labels each referenced tensor. Vertex-sized tensors, reduction outputs,
/// argmax indices and outputs of expensive operators are stashed. An edge
/// tensor is regenerated when the operations needed to rebuild it from
/// available tensors stay within `threshold` per element, counting only work
/// not already scheduled for regeneration.
pub fn plan_recompute(fwd: &IrGraph, bwd: &IrGraph, threshold: usize) -> CheckpointPlan {
    let mut labels = BTreeMap::new();
    let mut recompute_nodes = BTreeSet::new();
    let mut avail: BTreeSet<NodeId> = BTreeSet::new();
    for &(n, part) in &bwd.stash {
        let node = fwd.node(n);
        let label = if part == Part::Argmax || node.class != Class::Edge || elem_ops(fwd, n).is_none() {
            entry_or_stash(fwd, n)
        } else {
            let mut acc = Probe { cost: 0, nodes: BTreeSet::new(), leaves: BTreeSet::new() };
            if probe(fwd, n, &avail, &mut acc) && acc.cost <= threshold {
                for &l in &acc.leaves {
                    labels.entry((l, Part::Value)).or_insert_with(|| entry_or_stash(fwd, l));
                    avail.insert(l);
                }
                avail.extend(acc.nodes.iter().copied());
                recompute_nodes.extend(acc.nodes);
                Label::Recompute
            } else {
                entry_or_stash(fwd, n)
            }
        };
        if label != Label::Recompute && part == Part::Value {
            avail.insert(n);
        }
        // A leaf recorded earlier keeps its label.
        labels.entry((n, part)).and_modify(|l| {
            if label == Label::Recompute {
                *l = label;
            }
        }).or_insert(label);
    }
    CheckpointPlan { labels, recompute_nodes, threshold }
}

/// Rewrites the backward graph so that regenerated tensors are produced by
/// cloned forward operators instead of read from the stash store. The result
/// reads only stashed and entry tensors.
pub fn splice(fwd: &IrGraph, bwd: &IrGraph, plan: &CheckpointPlan) -> Result<IrGraph> {
    let mut b = IrBuilder::new(Phase::Backward);
    for p in &bwd.params {
        b.param(p.name.clone(), p.rows, p.cols);
    }
    let mut clones: HashMap<(NodeId, Part), NodeId> = HashMap::new();
    let mut stash = BTreeSet::new();

    fn clone_fwd(
        fwd: &IrGraph,
        plan: &CheckpointPlan,
        b: &mut IrBuilder,
        memo: &mut HashMap<(NodeId, Part), NodeId>,
        stash: &mut BTreeSet<(NodeId, Part)>,
        n: NodeId,
        part: Part,
    ) -> Result<NodeId> {
        if let Some(&id) = memo.get(&(n, part)) {
            return Ok(id);
        }
        let node = fwd.node(n);
        let id = if part == Part::Value && plan.recompute_nodes.contains(&n) {
            let mut inputs = Vec::with_capacity(node.inputs.len());
            for op in &node.inputs {
                let src = clone_fwd(fwd, plan, b, memo, stash, op.node, Part::Value)?;
                inputs.push(Operand { node: src, access: op.access });
            }
            b.set_tag(node.tag.as_deref());
            b.set_origin(None);
            b.push(node.kind.clone(), inputs)?
        } else {
            match plan.label(n, part) {
                Some(Label::Stash | Label::Entry) => {}
                other => {
                    return Err(Error::Checkpoint(format!("forward tensor {n} ({part:?}) is {other:?} in the plan")));
                }
            }
            stash.insert((n, part));
            let class = if part == Part::Argmax { Class::Vertex } else { node.class };
            b.set_tag(node.tag.as_deref());
            b.set_origin(None);
            b.source(OpKind::ForwardRef { node: n, part }, class, node.cols)
        };
        memo.insert((n, part), id);
        Ok(id)
    }

    let mut map = Vec::with_capacity(bwd.len());
    for n in &bwd.nodes {
        let id = match &n.kind {
            OpKind::ForwardRef { node, part } => clone_fwd(fwd, plan, &mut b, &mut clones, &mut stash, *node, *part)?,
            kind if kind.is_source() => {
                b.set_tag(n.tag.as_deref());
                b.set_origin(n.origin);
                b.source(kind.clone(), n.class, n.cols)
            }
            kind => {
                b.set_tag(n.tag.as_deref());
                b.set_origin(n.origin);
                let inputs = n.inputs.iter().map(|o| Operand { node: map[o.node], access: o.access }).collect();
                let id = b.push(kind.clone(), inputs)?;
                if let Some(of) = n.broadcast_of {
                    b.mark_broadcast(id, map[of]);
                }
                id
            }
        };
        map.push(id);
    }
    let exits = bwd.exits.iter().map(|&x| map[x]).collect();
    let mut out = b.finish(exits)?;
    out.stash = stash;
    Ok(out)
}
